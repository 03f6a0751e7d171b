"""Shared fixtures and oracles for the test suite."""

import numpy as np
import pytest

from nacap import autodiff as ad
from nacap.corpus import Corpus, PosLexicon, VideoRecord, Vocabulary
from nacap.model import Model, ModelConfig


def tiny_config(**overrides):
    """The small model used for hand checks and gradient oracles."""
    kw = dict(modality_dims=(6, 7), K=2, vocab_size=12, N_max=5,
              d_m=8, d_h=16, H=2, dropout_p=0.0, use_category=False)
    kw.update(overrides)
    return ModelConfig(**kw)


def rand_features(config, rng, batch=1):
    return [rng.normal(size=(batch, config.K, dv)).astype(np.float64)
            for dv in config.modality_dims]


def numeric_grad(value_fn, tensor, eps=1e-5):
    """Central finite differences of a scalar function w.r.t. one tensor."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value_fn()
        flat[i] = orig - eps
        down = value_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(tensor.data.shape)


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_param_grads(build_loss, params, eps=1e-5, floor=1e-6):
    """Analytic-vs-FD relative error over every entry of every parameter.

    build_loss() must construct the loss from scratch (it is re-evaluated
    for each perturbation, outside any tape).
    """
    for p in params.values():
        p.grad = None
    with ad.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {n: (p.grad.copy() if p.grad is not None
                    else np.zeros_like(p.data)) for n, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        fd = numeric_grad(lambda: build_loss().item(), p, eps=eps)
        worst = max(worst, max_rel_err(analytic[name], fd, floor=floor))
    return worst


def hand_corpus():
    """A deterministic 4-video corpus with 2 modalities and categories."""
    rng = ad.seeded_rng(99, "fixture")
    words = sorted({"a", "the", "is", "man", "dog", "running", "eating",
                    "bone"})
    vocab = Vocabulary(words)
    tags = {"a": "determiner", "the": "determiner", "is": "verb",
            "man": "noun", "dog": "noun", "bone": "noun", "street": "noun",
            "running": "verb", "eating": "verb"}
    lexicon = PosLexicon(tags)
    modalities = [{"name": "appearance", "d_v": 6, "K": 2},
                  {"name": "motion", "d_v": 7, "K": 2}]
    caps = [
        [["a", "man", "is", "running"], ["the", "man", "is", "running"]],
        [["a", "dog", "is", "eating", "a", "bone"]],
        [["the", "dog", "is", "running"], ["a", "dog", "running"]],
        [["a", "man", "eating", "a", "bone"]],
    ]
    splits = ["train", "train", "val", "test"]
    records = []
    for i, (c, s) in enumerate(zip(caps, splits)):
        feats = [rng.normal(size=(2, 6)).astype("<f4"),
                 rng.normal(size=(2, 7)).astype("<f4")]
        records.append(VideoRecord(f"vid{i}", feats, c, s, category=i % 2))
    return Corpus(records, vocab, lexicon, modalities, category_count=2)


ACCEPTANCE_LINES = []


def record_acceptance(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with ad.use_dtype(np.float64):
        yield


@pytest.fixture
def tiny_model(f64):
    return Model(tiny_config(), seed=7)
