"""Corpus-level caption quality and diversity measurement.

All inputs are pre-tokenized word lists (or whitespace-splittable strings);
no external normalization is applied, so absolute scores are only comparable
within this package. METEOR needs external lexical resources and is reported
as n/a.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict

import numpy as np

from .errors import EmptyInput, ShapeMismatch


def _tok(caption):
    return caption.split() if isinstance(caption, str) else list(caption)


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(hypotheses, references, max_n=4):
    """Corpus-level multi-reference BLEU@1..max_n (x100): clipped n-gram
    precision, uniform weights, brevity penalty with closest reference
    length (shorter wins ties)."""
    if not hypotheses:
        raise EmptyInput("no hypotheses")
    if len(hypotheses) != len(references):
        raise ShapeMismatch("hypothesis/reference count mismatch")
    clipped = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_w = _tok(hyp)
        refs_w = [_tok(r) for r in refs]
        if not refs_w:
            raise EmptyInput("a hypothesis has no references")
        hyp_len += len(hyp_w)
        ref_len += min((abs(len(r) - len(hyp_w)), len(r)) for r in refs_w)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp_w, n)
            max_ref = Counter()
            for r in refs_w:
                for gram, c in _ngrams(r, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(max_n):
        if clipped[n] == 0 or totals[n] == 0:
            dead = True
        else:
            log_sum += math.log(clipped[n] / totals[n])
        scores.append(0.0 if dead else 100.0 * bp * math.exp(log_sum / (n + 1)))
    return scores


_ROUGE_BETA = 1.2


def _lcs_len(a, b):
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(m):
        cur = [0] * (n + 1)
        for j in range(n):
            cur[j + 1] = prev[j] + 1 if a[i] == b[j] else max(prev[j + 1], cur[j])
        prev = cur
    return prev[n]


def rouge_l(hypotheses, references):
    """LCS F-measure (beta=1.2), best reference per hypothesis, averaged, x100."""
    if not hypotheses:
        raise EmptyInput("no hypotheses")
    if len(hypotheses) != len(references):
        raise ShapeMismatch("hypothesis/reference count mismatch")
    beta2 = _ROUGE_BETA ** 2
    scores = []
    for hyp, refs in zip(hypotheses, references):
        hyp_w = _tok(hyp)
        best = 0.0
        for ref in refs:
            ref_w = _tok(ref)
            lcs = _lcs_len(hyp_w, ref_w)
            if lcs == 0:
                continue
            prec = lcs / len(hyp_w)
            rec = lcs / len(ref_w)
            best = max(best, (1 + beta2) * rec * prec / (rec + beta2 * prec))
        scores.append(best)
    return 100.0 * sum(scores) / len(scores)


_CIDER_SIGMA = 6.0
_CIDER_N = 4


def _cider_vec(counts_by_n, doc_freq, log_num_docs):
    vecs, norms = [], []
    for n in range(_CIDER_N):
        vec = {}
        for gram, c in counts_by_n[n].items():
            idf = log_num_docs - math.log(max(doc_freq.get(gram, 0.0), 1.0))
            vec[gram] = c * idf
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d(hypotheses, references):
    """CIDEr-D: tf-idf weighted clipped n-gram similarity (n=1..4), Gaussian
    length penalty sigma=6, averaged over references, x10. Document
    frequencies come from the references of the evaluated set."""
    if not hypotheses:
        raise EmptyInput("no hypotheses")
    if len(hypotheses) != len(references):
        raise ShapeMismatch("hypothesis/reference count mismatch")
    ref_counts = []
    doc_freq = defaultdict(float)
    for refs in references:
        per_ref = [[_ngrams(_tok(r), n + 1) for n in range(_CIDER_N)] for r in refs]
        ref_counts.append(per_ref)
        seen = set()
        for counts_by_n in per_ref:
            for counts in counts_by_n:
                seen.update(counts.keys())
        for gram in seen:
            doc_freq[gram] += 1.0
    log_num = math.log(max(len(references), 1))
    scores = []
    for hyp, per_ref in zip(hypotheses, ref_counts):
        hyp_w = _tok(hyp)
        hyp_counts = [_ngrams(hyp_w, n + 1) for n in range(_CIDER_N)]
        hvecs, hnorms = _cider_vec(hyp_counts, doc_freq, log_num)
        total = 0.0
        for ref_by_n in per_ref:
            rvecs, rnorms = _cider_vec(ref_by_n, doc_freq, log_num)
            ref_len = sum(ref_by_n[0].values())
            delta = len(hyp_w) - ref_len
            penalty = math.exp(-(delta * delta) / (2 * _CIDER_SIGMA ** 2))
            sim = 0.0
            for n in range(_CIDER_N):
                num = sum(min(hvecs[n][g], rvecs[n].get(g, 0.0)) * rvecs[n].get(g, 0.0)
                          for g in hvecs[n])
                if hnorms[n] and rnorms[n]:
                    sim += num / (hnorms[n] * rnorms[n]) * penalty
            total += sim
        scores.append(10.0 * total / (_CIDER_N * max(len(per_ref), 1)))
    return float(sum(scores) / len(scores))


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------

def diversity(final_captions, training_captions, vocab_words, decode_traces=None,
              k_list=(1, 5)):
    """Novel / Unique / Vocab Usage plus Coverage@k over decoding traces.

    Unique follows the distinct-captions-over-total convention.
    decode_traces: per example, a list of candidate word-id/word sequences in
    confidence rank order, covering every intermediate revision.
    """
    if not final_captions:
        raise EmptyInput("no captions")
    finals = [tuple(_tok(c)) for c in final_captions]
    train_set = {tuple(_tok(c)) for c in training_captions}
    novel = 100.0 * sum(1 for c in finals if c not in train_set) / len(finals)
    unique = 100.0 * len(set(finals)) / len(finals)
    vocab_set = set(vocab_words)
    used = {w for c in finals for w in c} & vocab_set
    usage = 100.0 * len(used) / max(len(vocab_set), 1)
    coverage = {}
    if decode_traces is not None:
        for k in k_list:
            touched = set()
            for per_example in decode_traces:
                for cand in per_example[:k]:
                    for step_words in cand:
                        touched.update(w for w in step_words if w in vocab_set)
            coverage[k] = 100.0 * len(touched) / max(len(vocab_set), 1)
    return {"novel_pct": novel, "unique_pct": unique,
            "vocab_usage_pct": usage, "coverage_at": coverage}


def unique_ngrams_by_category(captions, categories, n=4):
    """Count distinct n-grams of the distinct captions within each category."""
    if len(captions) != len(categories):
        raise ShapeMismatch("captions/categories length mismatch")
    by_cat = defaultdict(set)
    seen = defaultdict(set)
    for cap, cat in zip(captions, categories):
        words = tuple(_tok(cap))
        if words in seen[cat]:
            continue
        seen[cat].add(words)
        for i in range(len(words) - n + 1):
            by_cat[cat].add(words[i:i + n])
    return {cat: len(grams) for cat, grams in sorted(by_cat.items())}


def per_position_vocab_usage(training_captions, vocab_words, n_positions):
    """Share of the vocabulary observed at each sentence position (x100)."""
    vocab_set = set(vocab_words)
    seen = [set() for _ in range(n_positions)]
    for cap in training_captions:
        for i, w in enumerate(_tok(cap)[:n_positions]):
            if w in vocab_set:
                seen[i].add(w)
    denom = max(len(vocab_set), 1)
    return [100.0 * len(s) / denom for s in seen]


def latency_summary(wall_ms_list, passes_list):
    arr = np.asarray(wall_ms_list, dtype=np.float64)
    return {
        "mean_ms": float(arr.mean()),
        "p50_ms": float(np.percentile(arr, 50)),
        "p95_ms": float(np.percentile(arr, 95)),
        "passes_mean": float(np.mean(passes_list)),
        "per_example": [float(x) for x in arr],
    }


def metric_report(hypotheses, references, training_captions=None,
                  vocab_words=None, decode_traces=None, k_list=(1, 5),
                  latency=None):
    """Assemble the full report dict; see the CLI for serialization."""
    b1, b2, b3, b4 = bleu(hypotheses, references)
    report = {
        "bleu": {"B1": b1, "B2": b2, "B3": b3, "B4": b4},
        "rouge_l": rouge_l(hypotheses, references),
        "cider_d": cider_d(hypotheses, references),
        "meteor": "n/a",
    }
    if training_captions is not None and vocab_words is not None:
        report.update(diversity(hypotheses, training_captions, vocab_words,
                                decode_traces, k_list))
    if latency is not None:
        report["latency"] = latency
    return report
