"""Training-example construction, the three losses, the joint objective and
the optimization schedule for both the parallel decoder and the causal
baseline.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, categories_of, features_of, length_distribution
from .errors import (
    DivergedLoss,
    EmptyCorpus,
    EmptySentence,
    IndexOutOfVocab,
    NotADistribution,
    ShapeMismatch,
)
from .model import BEGIN, END, MASK, PAD, VISUAL, Model, ModelConfig

VARIANTS = ("nacf", "na-b", "ar-b", "ar-b-vis")


@dataclass
class TrainingConfig:
    beta_low: float = 0.0
    beta_high: float = 1.0
    lambda_vis: float = 0.8
    batch_size: int = 64
    lr_init: float = 5e-4
    lr_decay: float = 0.9
    lr_min: float = 5e-5
    weight_decay: float = 5e-4
    epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    pos_subset: tuple = ("noun", "verb")

    def __post_init__(self):
        if not 0.0 <= self.beta_low <= self.beta_high <= 1.0:
            raise ShapeMismatch(
                f"masking range [{self.beta_low}, {self.beta_high}] invalid")
        if self.lambda_vis < 0:
            raise ShapeMismatch("lambda_vis must be >= 0")
        self.pos_subset = tuple(self.pos_subset)

    def lr_at(self, epoch):
        return max(self.lr_init * self.lr_decay ** epoch, self.lr_min)

    def to_dict(self):
        d = asdict(self)
        d["pos_subset"] = list(self.pos_subset)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MaskedExample:
    y_star: list          # ground-truth token ids, length N
    mask_positions: list  # sorted 0-based positions, nonempty

    @property
    def n(self):
        return len(self.y_star)

    @property
    def observed_positions(self):
        masked = set(self.mask_positions)
        return [i for i in range(self.n) if i not in masked]


def sample_mask(y_star, beta_low, beta_high, rng) -> MaskedExample:
    """Mask count = clamp(round(beta * N), 1, N) with beta ~ U[low, high];
    positions drawn uniformly without replacement."""
    n = len(y_star)
    if n < 1:
        raise EmptySentence("cannot mask an empty sentence")
    beta = rng.uniform(beta_low, beta_high)
    count = int(np.clip(round(beta * n), 1, n))
    positions = sorted(rng.choice(n, size=count, replace=False).tolist())
    return MaskedExample(list(y_star), positions)


def build_visual_target(words, lexicon, pos_subset=("noun", "verb")):
    """Visual-word target: keep words whose POS is in the subset (minus the
    copula stoplist), replace everything else with [mask]."""
    return [w if lexicon.is_visual(w, pos_subset) else "[mask]" for w in words]


def visual_target_ids(y_star_ids, vocab, lexicon, pos_subset=("noun", "verb")):
    words = vocab.decode(y_star_ids)
    return [vocab.id(w) if w != "[mask]" else MASK
            for w in build_visual_target(words, lexicon, pos_subset)]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_len(length_probs, l_star):
    """KL(L* || L) averaged over the batch; 0 log 0 := 0."""
    l_star = np.asarray(l_star, dtype=np.float64)
    if l_star.ndim == 1:
        l_star = l_star[None]
    probs = length_probs.data
    if probs.ndim == 1:
        probs = probs[None]
    if l_star.shape != probs.shape:
        raise NotADistribution(f"shapes {l_star.shape} vs {probs.shape}")
    for arr, label in ((l_star, "L*"), (probs, "L")):
        sums = arr.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise NotADistribution(f"{label} rows sum to {sums}")
    batch = l_star.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = np.where(l_star > 0, l_star * np.log(l_star), 0.0).sum()
    # the epsilon keeps log finite for hand-fed distributions with exact
    # zeros; softmax outputs are strictly positive so it is negligible there
    cross = ad.sum_(ad.mul(ad.constant(l_star),
                           ad.log(ad.add(length_probs, 1e-12))))
    return ad.add(ad.scale(cross, -1.0 / batch), float(entropy) / batch)


def _masked_nll(distributions, targets, weight_mask):
    """Mean negative log likelihood over positions with weight 1."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and targets.max() >= distributions.data.shape[-1]:
        raise IndexOutOfVocab(f"target id {targets.max()}")
    if targets.size and targets.min() < 0:
        raise IndexOutOfVocab("negative target id")
    weight = np.asarray(weight_mask, dtype=ad.default_dtype())
    total = float(weight.sum())
    if total == 0:
        raise EmptySentence("no positions contribute to the loss")
    lp = ad.log(ad.take_along_last(distributions, targets))
    return ad.scale(ad.sum_(ad.mul(lp, ad.constant(weight))), -1.0 / total)


def loss_mlm(distributions, targets, mask_matrix):
    """NLL of the masked tokens only, averaged over masked positions."""
    return _masked_nll(distributions, targets, mask_matrix)


def loss_vis(distributions, visual_targets, real_matrix):
    """NLL of the visual-word target over all real positions; [mask] is a
    legitimate target class at non-visual positions."""
    return _masked_nll(distributions, visual_targets, real_matrix)


def loss_total(l_len, l_mlm, l_vis, lambda_vis):
    out = ad.add(l_len, l_mlm) if l_len is not None else l_mlm
    if l_vis is not None and lambda_vis > 0:
        out = ad.add(out, ad.scale(l_vis, lambda_vis))
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay applied to weight matrices only."""

    def __init__(self, params, specs, config: TrainingConfig):
        self.params = params
        self.decay_names = {n for n, (_, kind) in specs.items() if kind == "weight"}
        self.cfg = config
        self.m = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in params.items()}
        self.t = 0

    def step(self, lr):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergedLoss(f"non-finite gradient for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            if name in self.decay_names and cfg.weight_decay > 0:
                update = update + cfg.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        state = {"step": np.array([self.t], dtype=np.float32)}
        for name in self.params:
            state[f"m.{name}"] = self.m[name].astype(np.float32)
            state[f"v.{name}"] = self.v[name].astype(np.float32)
        return state

    def load_state_arrays(self, arrays):
        self.t = int(arrays["step"][0])
        for name in self.params:
            self.m[name] = arrays[f"m.{name}"].astype(np.float64)
            self.v[name] = arrays[f"v.{name}"].astype(np.float64)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def _pad_to(rows, n, fill=PAD):
    return np.array([list(r) + [fill] * (n - len(r)) for r in rows], dtype=np.int64)


def build_mlm_batch(examples):
    """examples: list of MaskedExample -> dict of padded arrays."""
    n = max(e.n for e in examples)
    inputs, targets, mask_m, real_m = [], [], [], []
    for e in examples:
        masked = set(e.mask_positions)
        inputs.append([MASK if i in masked else t for i, t in enumerate(e.y_star)])
        targets.append(list(e.y_star))
        mask_m.append([1.0 if i in masked else 0.0 for i in range(e.n)])
        real_m.append([1.0] * e.n)
    return {
        "inputs": _pad_to(inputs, n),
        "targets": _pad_to(targets, n),
        "mask_matrix": _pad_to([[int(x) for x in row] for row in mask_m], n, 0),
        "real_matrix": _pad_to([[int(x) for x in row] for row in real_m], n, 0),
    }


def build_visual_batch(token_id_lists, vocab, lexicon, pos_subset):
    n = max(len(t) for t in token_id_lists)
    inputs = [[VISUAL] * len(t) for t in token_id_lists]
    targets = [visual_target_ids(t, vocab, lexicon, pos_subset)
               for t in token_id_lists]
    real = [[1] * len(t) for t in token_id_lists]
    return {
        "inputs": _pad_to(inputs, n),
        "targets": _pad_to(targets, n),
        "real_matrix": _pad_to(real, n, 0),
    }


def build_ar_batch(token_id_lists, n_max):
    """Teacher-forcing arrays: inputs [<s>, y1..y_{N-1}], targets [y1..yN]
    with captions clipped to N_max - 1 so </s> prediction fits the position
    table."""
    clipped = [list(t)[: n_max - 1] for t in token_id_lists]
    n = max(len(t) for t in clipped) + 1
    inputs = [[BEGIN] + t for t in clipped]
    targets = [t + [END] for t in clipped]
    real = [[1] * (len(t) + 1) for t in clipped]
    return {
        "inputs": _pad_to(inputs, n),
        "targets": _pad_to(targets, n),
        "real_matrix": _pad_to(real, n, 0),
    }


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def training_pairs(corpus: Corpus, n_max):
    """(video index into train records, caption token ids) pairs."""
    train = corpus.split("train")
    if not train:
        raise EmptyCorpus("no training videos")
    pairs = []
    for vi, rec in enumerate(train):
        for cap in rec.captions:
            ids = corpus.vocab.encode(cap[:n_max])
            pairs.append((vi, ids))
    return train, pairs


def train(corpus: Corpus, model_config: ModelConfig, config: TrainingConfig,
          variant="nacf", log_path=None, start_epoch=0, model=None,
          optimizer=None, val_bleu_fn=None):
    """Run the optimization schedule; returns (model, per-epoch log records).

    variant: nacf (full objective), na-b (lambda_vis = 0), ar-b (causal,
    next-token NLL), ar-b-vis (causal plus the visual auxiliary loss).
    """
    if variant not in VARIANTS:
        raise ShapeMismatch(f"unknown variant {variant!r}")
    causal = variant.startswith("ar-b")
    lambda_vis = 0.0 if variant == "na-b" else config.lambda_vis
    if variant == "ar-b":
        lambda_vis = 0.0

    if model is None:
        model = Model(model_config, seed=config.seed)
    from .model import param_specs
    if optimizer is None:
        optimizer = Adam(model.params, param_specs(model_config), config)

    train_records, pairs = training_pairs(corpus, model_config.N_max)
    if not pairs:
        raise EmptyCorpus("no training captions")
    l_star = np.stack([
        length_distribution(r.captions, model_config.N_max) for r in train_records])

    log = []
    records_out = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            lr = config.lr_at(epoch)
            order_rng = ad.seeded_rng(config.seed, "order", epoch)
            order = order_rng.permutation(len(pairs))
            sums = {"len": 0.0, "mlm": 0.0, "vis": 0.0}
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                batch_ids = order[start:start + config.batch_size]
                batch_pairs = [pairs[i] for i in batch_ids]
                vids = [vi for vi, _ in batch_pairs]
                feats = features_of(train_records, vids)
                cats = categories_of(train_records, vids)
                drop_rng = ad.seeded_rng(config.seed, "dropout", epoch, n_batches)
                with ad.Tape() as tape:
                    R = model.encode(feats, cats)
                    l_len_t = None
                    if not causal:
                        L = model.predict_length(R)
                        l_len_t = loss_len(L, l_star[vids])
                    if causal:
                        arb = build_ar_batch([ids for _, ids in batch_pairs],
                                             model_config.N_max)
                        probs = model.decode(arb["inputs"], R, train=True,
                                             rng=drop_rng,
                                             pad_mask=arb["real_matrix"] > 0)
                        l_mlm_t = _masked_nll(probs, arb["targets"],
                                              arb["real_matrix"])
                    else:
                        examples = []
                        for bi, (vi, ids) in zip(batch_ids, batch_pairs):
                            mask_rng = ad.seeded_rng(config.seed, "mask",
                                                     epoch, int(bi))
                            examples.append(sample_mask(
                                ids, config.beta_low, config.beta_high, mask_rng))
                        mb = build_mlm_batch(examples)
                        probs = model.decode(mb["inputs"], R, train=True,
                                             rng=drop_rng,
                                             pad_mask=mb["real_matrix"] > 0)
                        l_mlm_t = loss_mlm(probs, mb["targets"], mb["mask_matrix"])
                    l_vis_t = None
                    if lambda_vis > 0:
                        vb = build_visual_batch(
                            [ids for _, ids in batch_pairs], corpus.vocab,
                            corpus.lexicon, config.pos_subset)
                        vprobs = model.decode(vb["inputs"], R, train=True,
                                              rng=drop_rng,
                                              pad_mask=vb["real_matrix"] > 0)
                        l_vis_t = loss_vis(vprobs, vb["targets"],
                                           vb["real_matrix"])
                    total = loss_total(l_len_t, l_mlm_t, l_vis_t, lambda_vis)
                    if not math.isfinite(total.item()):
                        raise DivergedLoss(f"loss diverged at epoch {epoch}")
                    optimizer.zero_grad()
                    tape.backward(total)
                optimizer.step(lr)
                sums["len"] += l_len_t.item() if l_len_t is not None else 0.0
                sums["mlm"] += l_mlm_t.item()
                sums["vis"] += l_vis_t.item() if l_vis_t is not None else 0.0
                n_batches += 1
            record = {
                "epoch": epoch,
                "loss_len": sums["len"] / n_batches,
                "loss_mlm": sums["mlm"] / n_batches,
                "loss_vis": sums["vis"] / n_batches,
                "lr": lr,
                "val_bleu4": val_bleu_fn(model) if val_bleu_fn else None,
                "wall_seconds": time.perf_counter() - t0,
            }
            log.append(record)
            if records_out:
                records_out.write(json.dumps(record, sort_keys=True) + "\n")
                records_out.flush()
    finally:
        if records_out:
            records_out.close()
    return model, log
