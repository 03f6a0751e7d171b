"""Coarse-to-fine inference: template generation, the three iterative
parallel decoding algorithms, length beam, teacher rescoring, candidate
selection and the autoregressive baseline decoder.

All tie-breaks (argmax, top-k, candidate selection) resolve to the lowest
index so runs are reproducible across platforms.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, LengthOutOfRange, ShapeMismatch
from .model import BEGIN, END, FIRST_WORD_ID, MASK, PAD, VISUAL, Model

ALGORITHMS = ("mp", "ef", "l2r")

MIN_LENGTH = 4  # shortest decodable caption


@dataclass
class DecodeConfig:
    algorithm: str = "mp"
    use_template: bool = True
    T: int = 5
    q: int = 1
    B: int = 6
    use_rescoring: bool = False
    refine_visual: bool = True
    fixed_T: int | None = None
    keep_trace: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.T < 1 or self.q < 1 or self.B < 1:
            raise ConfigError("T, q and B must all be >= 1")
        if self.fixed_T is not None and self.fixed_T < 1:
            raise ConfigError("fixed_T must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DecodeState:
    """Per-candidate working state for the iterative algorithms."""
    n: int
    tokens: np.ndarray        # current Y^(t), int64 (n,)
    conf: np.ndarray          # C^(t), float64 (n,)
    observed: np.ndarray      # bool (n,), membership in Y_obs^(t)
    template_obs: np.ndarray  # bool (n,), Y_obs^(1) from the template
    passes: int = 0
    trace: list = field(default_factory=list)

    def unobserved(self):
        return np.flatnonzero(~self.observed)

    def snapshot(self, label):
        self.trace.append({
            "step": label,
            "tokens": self.tokens.tolist(),
            "confidence": [round(float(c), 6) for c in self.conf],
            "observed": self.observed.tolist(),
        })


def mp_mask_counts(n, t_total):
    """m_t = max(floor(N * (T - t + 1) / T), 1) for t = 1..T."""
    return [max(n * (t_total - t + 1) // t_total, 1)
            for t in range(1, t_total + 1)]


def ef_iterations(n, u, q):
    """Iteration count for Easy-First / Left-to-Right."""
    return math.ceil(max(n - u, 0) / q)


def _stable_topk_desc(values, k):
    """Indices of the k largest values, ties resolved to the lowest index."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return order[:k]


def _argmax_restricted(prob_row, allowed_ids):
    """(token, confidence) over a restricted candidate set; lowest id wins ties."""
    sub = prob_row[allowed_ids]
    best = int(np.argmax(sub))  # np.argmax returns the first maximum
    return int(allowed_ids[best]), float(sub[best])


class Decoder:
    """Inference engine bound to a trained parallel model (and optionally a
    causal teacher for rescoring)."""

    def __init__(self, model: Model, teacher: Model | None = None):
        self.model = model
        self.teacher = teacher
        vocab_size = model.config.vocab_size
        self.word_ids = np.arange(FIRST_WORD_ID, vocab_size)
        # template predictions may be [mask] or a real word, nothing else
        self.template_ids = np.concatenate(([MASK], self.word_ids))

    # -- batched decode over candidates --------------------------------------

    def _batched_predict(self, states, R, active):
        """One shared decoder call over the active candidates, padded to the
        longest length. Returns per-candidate probability arrays."""
        idx = [i for i, a in enumerate(active) if a]
        if not idx:
            return {}
        n_pad = max(states[i].n for i in idx)
        tokens = np.full((len(idx), n_pad), PAD, dtype=np.int64)
        pad_mask = np.zeros((len(idx), n_pad), dtype=bool)
        for row, i in enumerate(idx):
            s = states[i]
            inp = np.where(s.observed, s.tokens, MASK)
            tokens[row, :s.n] = inp
            pad_mask[row, :s.n] = True
        reps = R.data if R.data.shape[0] == len(idx) else np.repeat(
            R.data, len(idx), axis=0)
        from . import autodiff as ad
        probs = self.model.decode(tokens, ad.constant(reps),
                                  pad_mask=pad_mask).data
        out = {}
        for row, i in enumerate(idx):
            out[i] = probs[row, :states[i].n]
            states[i].passes += 1
        return out

    # -- stage 1: template ----------------------------------------------------

    def generate_template(self, R, n):
        """Decode N copies of [visual]; per position keep the argmax over the
        template candidate set ([mask] plus real words)."""
        cfg = self.model.config
        if not MIN_LENGTH <= n <= cfg.N_max:
            raise LengthOutOfRange(f"N={n} outside [4, {cfg.N_max}]")
        from . import autodiff as ad
        probs = self.model.decode(np.full((1, n), VISUAL, dtype=np.int64),
                                  R).data[0]
        tokens = np.empty(n, dtype=np.int64)
        conf = np.empty(n, dtype=np.float64)
        for i in range(n):
            tokens[i], conf[i] = _argmax_restricted(probs[i], self.template_ids)
        return tokens, conf

    def init_state(self, R, n, cfg: DecodeConfig):
        """Stage-1 pass (when templates are on) plus Y_obs^(1) initialization."""
        if cfg.use_template:
            tokens, conf = self.generate_template(R, n)
            observed = tokens != MASK
            passes = 1
        else:
            cfg_n_max = self.model.config.N_max
            if not MIN_LENGTH <= n <= cfg_n_max:
                raise LengthOutOfRange(f"N={n} outside [4, {cfg_n_max}]")
            tokens = np.full(n, MASK, dtype=np.int64)
            conf = np.zeros(n, dtype=np.float64)
            observed = np.zeros(n, dtype=bool)
            passes = 0
        state = DecodeState(n=n, tokens=tokens, conf=conf,
                            observed=observed.copy(),
                            template_obs=observed.copy(), passes=passes)
        if cfg.keep_trace:
            state.snapshot("template")
        return state

    # -- stage 2 algorithms ---------------------------------------------------

    def _apply_predictions(self, state, probs):
        """Eq.-12 style update: argmax over real words at unobserved
        positions, previous values kept elsewhere."""
        for i in state.unobserved():
            state.tokens[i], state.conf[i] = _argmax_restricted(
                probs[i], self.word_ids)

    def run_mask_predict(self, states, R, cfg: DecodeConfig, active=None):
        t_total = cfg.T
        if active is None:
            active = [True] * len(states)
        schedules = {i: mp_mask_counts(states[i].n, t_total)
                     for i, a in enumerate(active) if a}
        for t in range(1, t_total + 1):
            probs = self._batched_predict(states, R, active)
            for i, p in probs.items():
                state = states[i]
                self._apply_predictions(state, p)
                if t < t_total:
                    m_next = schedules[i][t]  # m_{t+1}
                    keep = _stable_topk_desc(state.conf, state.n - m_next)
                    state.observed[:] = False
                    state.observed[keep] = True
                else:
                    state.observed[:] = True
                if cfg.keep_trace:
                    state.snapshot(f"mp:{t}")

    def _commit_counts(self, state, cfg: DecodeConfig):
        """Per-iteration commit sizes for EF/L2R; fixed_T spreads the work
        over exactly fixed_T iterations for constant-time decoding."""
        remaining = int((~state.observed).sum())
        if cfg.fixed_T is not None:
            counts = []
            for t in range(cfg.fixed_T):
                take = math.ceil(remaining / (cfg.fixed_T - t)) if remaining else 0
                counts.append(take)
                remaining -= take
            return counts
        return [cfg.q] * ef_iterations(state.n, int(state.observed.sum()), cfg.q)

    def run_easy_first(self, states, R, cfg: DecodeConfig, active=None,
                       leftmost=False):
        if active is None:
            active = [True] * len(states)
        counts = {i: self._commit_counts(states[i], cfg)
                  for i, a in enumerate(active) if a}
        step = 0
        while True:
            now_active = [a and step < len(counts.get(i, []))
                          for i, a in enumerate(active)]
            if not any(now_active):
                break
            probs = self._batched_predict(states, R, now_active)
            for i, p in probs.items():
                state = states[i]
                unobs = state.unobserved()
                preds = {}
                for j in unobs:
                    preds[j] = _argmax_restricted(p[j], self.word_ids)
                take = min(counts[i][step], len(unobs))
                if leftmost:
                    chosen = unobs[:take]  # unobserved() is position-sorted
                else:
                    confs = [preds[j][1] for j in unobs]
                    chosen = unobs[_stable_topk_desc(confs, take)]
                for j in chosen:
                    state.tokens[j], state.conf[j] = preds[j]
                    state.observed[j] = True
                if cfg.keep_trace:
                    label = "l2r" if leftmost else "ef"
                    state.snapshot(f"{label}:{step + 1}")
            step += 1

    def refine_visual_words(self, states, R, cfg: DecodeConfig, active=None):
        """Re-predict the original template positions conditioned on all other
        final tokens; no-op for candidates without template words."""
        if active is None:
            active = [True] * len(states)
        needs = [a and cfg.use_template and bool(states[i].template_obs.any())
                 for i, a in enumerate(active)]
        if not any(needs):
            return
        saved = {}
        for i, need in enumerate(needs):
            if need:
                saved[i] = states[i].observed.copy()
                states[i].observed = ~states[i].template_obs
        probs = self._batched_predict(states, R, needs)
        for i, p in probs.items():
            state = states[i]
            for j in np.flatnonzero(state.template_obs):
                state.tokens[j], state.conf[j] = _argmax_restricted(
                    p[j], self.word_ids)
            state.observed = saved[i]
            state.observed[:] = True
            if cfg.keep_trace:
                state.snapshot("refine")

    # -- length beam / selection ---------------------------------------------

    def length_beam(self, length_probs, b):
        """Top-b lengths in [4, N_max]; ties resolved to the shorter length."""
        probs = np.asarray(length_probs, dtype=np.float64).reshape(-1)
        lengths = np.arange(1, probs.size + 1)
        valid = lengths >= MIN_LENGTH
        cand = sorted(zip(-probs[valid], lengths[valid]))
        return [int(n) for _, n in cand[:b]]

    def teacher_rescore(self, tokens, R):
        """Per-token teacher probabilities in one causal forward pass."""
        if self.teacher is None:
            raise ConfigError("rescoring requires a teacher model")
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[-1]
        if tokens.ndim == 1:
            tokens = tokens[None]
        inputs = np.concatenate(
            [np.full((tokens.shape[0], 1), BEGIN, dtype=np.int64),
             tokens[:, :-1]], axis=1)
        from . import autodiff as ad
        reps = R.data if R.data.shape[0] == tokens.shape[0] else np.repeat(
            R.data, tokens.shape[0], axis=0)
        probs = self.teacher.decode(inputs, ad.constant(reps)).data
        z = np.take_along_axis(probs, tokens[..., None], axis=-1)[..., 0]
        return z

    @staticmethod
    def candidate_score(conf, z=None):
        """Mean log confidence, optionally joint with the teacher marks."""
        conf = np.asarray(conf, dtype=np.float64)
        n = conf.size
        if z is None:
            return float(np.log(conf).sum() / n)
        return float((np.log(conf) + np.log(np.asarray(z))).sum() / (2 * n))

    @staticmethod
    def select_best(candidates):
        """candidates: list of (tokens, conf, z or None). Highest score wins;
        ties go to the shorter candidate, then lexicographic token order."""
        scored = []
        for tokens, conf, z in candidates:
            score = Decoder.candidate_score(conf, z)
            scored.append((-score, len(tokens), list(tokens)))
        best = min(range(len(scored)), key=lambda i: scored[i])
        return best

    # -- full pipeline ----------------------------------------------------------

    def caption(self, features, cfg: DecodeConfig, categories=None):
        """encode -> length beam -> stage 1 + stage 2 per length -> optional
        rescoring -> selection. Returns a result dict with counters."""
        if cfg.use_rescoring and self.teacher is None:
            raise ConfigError("use_rescoring set but no teacher given")
        t_enc = time.perf_counter()
        R = self.model.encode(features, categories)
        length_probs = self.model.predict_length(R).data[0]
        encode_ms = (time.perf_counter() - t_enc) * 1e3

        t_dec = time.perf_counter()
        lengths = self.length_beam(length_probs, cfg.B)
        states = [self.init_state(R, n, cfg) for n in lengths]
        if cfg.algorithm == "mp":
            self.run_mask_predict(states, R, cfg)
        else:
            self.run_easy_first(states, R, cfg, leftmost=cfg.algorithm == "l2r")
            if cfg.refine_visual:
                self.refine_visual_words(states, R, cfg)
        z_rows = None
        if cfg.use_rescoring:
            n_pad = max(s.n for s in states)
            padded = np.full((len(states), n_pad), PAD, dtype=np.int64)
            for i, s in enumerate(states):
                padded[i, :s.n] = s.tokens
            z_all = self.teacher_rescore(padded, R)
            z_rows = [z_all[i, :s.n] for i, s in enumerate(states)]
            for s in states:
                s.passes += 1
        candidates = [(s.tokens, s.conf,
                       None if z_rows is None else z_rows[i])
                      for i, s in enumerate(states)]
        best = self.select_best(candidates)
        decode_ms = (time.perf_counter() - t_dec) * 1e3

        chosen = states[best]
        return {
            "tokens": chosen.tokens.tolist(),
            "length": chosen.n,
            "score": self.candidate_score(
                chosen.conf, None if z_rows is None else z_rows[best]),
            "passes": chosen.passes,
            "passes_per_candidate": [s.passes for s in states],
            "lengths": lengths,
            "encode_ms": encode_ms,
            "wall_ms": decode_ms,
            "trace": [s.trace for s in states] if cfg.keep_trace else None,
        }


# ---------------------------------------------------------------------------
# Autoregressive baseline decoding
# ---------------------------------------------------------------------------

def ar_decode(teacher: Model, R, beam_size=5, min_length=1, keep_trace=False):
    """Beam search with end-token termination and mean-log-prob scoring.

    Counted passes follow the convention of one pass per emitted kept token,
    so a length-N caption costs N passes.
    """
    from . import autodiff as ad
    cfg = teacher.config
    n_max = cfg.N_max
    banned = np.array([PAD, MASK, VISUAL, BEGIN], dtype=np.int64)
    beams = [([], 0.0)]  # (tokens, total logp)
    finished = []
    trace = []
    for step in range(n_max):
        prefixes = np.array([[BEGIN] + toks for toks, _ in beams], dtype=np.int64)
        probs = teacher.decode(prefixes, ad.constant(
            np.repeat(R.data, len(beams), axis=0))).data[:, -1, :]
        expansions = []
        for bi, (toks, logp) in enumerate(beams):
            row = np.log(np.maximum(probs[bi], 1e-30))
            row[banned] = -np.inf
            if len(toks) < min_length:  # ending now would leave < min_length words
                row[END] = -np.inf
            top = _stable_topk_desc(row, beam_size + 1)
            for tok in top:
                expansions.append((toks + [int(tok)], logp + float(row[tok])))
        # normalized score, then length, then token order: deterministic
        expansions.sort(key=lambda e: (-e[1] / len(e[0]), len(e[0]), e[0]))
        beams = []
        for toks, logp in expansions:
            if toks[-1] == END:
                finished.append((toks[:-1], logp, len(toks)))
            else:
                beams.append((toks, logp))
            if len(beams) == beam_size:
                break
        if keep_trace and beams:
            trace.append({"step": step + 1, "beam": [b[0] for b in beams]})
        if not beams:
            break
    for toks, logp in beams:
        finished.append((toks, logp, len(toks) + 1))
    finished.sort(key=lambda f: (-f[1] / f[2], len(f[0]), f[0]))
    best_tokens = finished[0][0]
    return {
        "tokens": best_tokens,
        "length": len(best_tokens),
        "score": finished[0][1] / finished[0][2],
        "passes": len(best_tokens),
        "trace": trace if keep_trace else None,
    }


def ar_caption(teacher: Model, features, beam_size=5, min_length=1,
               categories=None, keep_trace=False):
    t_enc = time.perf_counter()
    R = teacher.encode(features, categories)
    encode_ms = (time.perf_counter() - t_enc) * 1e3
    t_dec = time.perf_counter()
    out = ar_decode(teacher, R, beam_size=beam_size, min_length=min_length,
                    keep_trace=keep_trace)
    out["encode_ms"] = encode_ms
    out["wall_ms"] = (time.perf_counter() - t_dec) * 1e3
    return out


def expected_passes(cfg: DecodeConfig, n, u):
    """Analytic pass count per candidate (excluding teacher rescoring)."""
    template = 1 if cfg.use_template else 0
    if cfg.algorithm == "mp":
        return template + cfg.T
    iters = cfg.fixed_T if cfg.fixed_T is not None else ef_iterations(n, u, cfg.q)
    refine = 1 if (cfg.refine_visual and cfg.use_template and u > 0) else 0
    return template + iters + refine
