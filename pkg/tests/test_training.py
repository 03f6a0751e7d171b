"""Training layer: masking rule, visual targets, the three losses, the
optimizer/schedule, and seeded end-to-end smoke properties."""

import math

import numpy as np
import pytest

from nacap import autodiff as ad
from nacap.corpus import PosLexicon, SynthSpec, Vocabulary, synth_generate
from nacap.errors import (
    EmptySentence,
    IndexOutOfVocab,
    NotADistribution,
    ShapeMismatch,
)
from nacap.model import MASK, Model, param_specs
from nacap.training import (
    Adam,
    TrainingConfig,
    build_ar_batch,
    build_mlm_batch,
    build_visual_batch,
    build_visual_target,
    loss_len,
    loss_mlm,
    loss_total,
    loss_vis,
    sample_mask,
    train,
    visual_target_ids,
)
from tests.conftest import check_param_grads, rand_features, tiny_config


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

def test_sample_mask_forced_ratios():
    rng = ad.seeded_rng(0, "mask")
    full = sample_mask(list(range(8)), 1.0, 1.0, rng)
    assert full.mask_positions == list(range(8))
    floor = sample_mask(list(range(8)), 0.0, 0.0, rng)
    assert len(floor.mask_positions) == 1
    with pytest.raises(EmptySentence):
        sample_mask([], 0.0, 1.0, rng)


def test_sample_mask_positions_sorted_unique_in_range():
    for trial in range(50):
        rng = ad.seeded_rng(trial, "maskpos")
        ex = sample_mask(list(range(9)), 0.0, 1.0, rng)
        pos = ex.mask_positions
        assert pos == sorted(set(pos))
        assert all(0 <= p < 9 for p in pos)
        assert 1 <= len(pos) <= 9
        assert sorted(ex.observed_positions + pos) == list(range(9))


def test_mask_count_distribution_matches_exact_pmf():
    """count = clamp(round(10*beta), 1, 10), beta ~ U[0,1]: P(1) = 0.15
    (clamp floor absorbs round=0), P(2..9) = 0.10 each, P(10) = 0.05.
    Chi-square against this exact pmf, df=9, critical value 21.666 (p=0.01).
    """
    n, draws = 10, 10000
    rng = ad.seeded_rng(123, "pmf")
    counts = np.zeros(n)
    for _ in range(draws):
        ex = sample_mask(list(range(n)), 0.0, 1.0, rng)
        counts[len(ex.mask_positions) - 1] += 1
    pmf = np.array([0.15] + [0.10] * 8 + [0.05])
    expected = pmf * draws
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 21.666


# ---------------------------------------------------------------------------
# Visual-word targets
# ---------------------------------------------------------------------------

_LEX = PosLexicon({"a": "determiner", "the": "determiner", "is": "verb",
                   "man": "noun", "bread": "noun", "cutting": "verb",
                   "in": "other"})


def test_visual_target_reference_example():
    words = ["a", "man", "is", "cutting", "a", "bread"]
    assert build_visual_target(words, _LEX) == \
        ["[mask]", "man", "[mask]", "cutting", "[mask]", "bread"]


def test_visual_target_degenerate_and_subset():
    assert build_visual_target(["a", "the", "in"], _LEX) == ["[mask]"] * 3
    words = ["man", "cutting"]
    assert build_visual_target(words, _LEX, pos_subset=("noun",)) == \
        ["man", "[mask]"]


def test_visual_target_ids_use_mask_id():
    vocab = Vocabulary(sorted(["a", "man", "is", "cutting", "bread"]))
    ids = vocab.encode(["a", "man", "is", "cutting", "a", "bread"])
    out = visual_target_ids(ids, vocab, _LEX)
    assert out == [MASK, vocab.id("man"), MASK, vocab.id("cutting"),
                   MASK, vocab.id("bread")]


# ---------------------------------------------------------------------------
# Losses (closed forms)
# ---------------------------------------------------------------------------

def _dist(rows):
    return ad.constant(np.asarray(rows, dtype=np.float64))


def test_loss_len_identity_and_closed_form(f64):
    l_star = np.zeros(20)
    l_star[6] = 1.0
    same = loss_len(_dist(l_star), l_star)
    assert abs(same.item()) < 1e-9
    uniform = np.full(20, 1 / 20)
    kl = loss_len(_dist(uniform), l_star)
    assert kl.item() == pytest.approx(math.log(20), abs=1e-6)


def test_loss_len_nonnegative_random_pairs(f64):
    rng = ad.seeded_rng(9, "klpairs")
    for _ in range(200):
        a = rng.dirichlet(np.ones(12))
        b = rng.dirichlet(np.ones(12))
        assert loss_len(_dist(b), a).item() >= -1e-9


def test_loss_len_rejects_non_distributions(f64):
    with pytest.raises(NotADistribution):
        loss_len(_dist([0.5, 0.2]), np.array([0.5, 0.5]))
    with pytest.raises(NotADistribution):
        loss_len(_dist([0.5, 0.5]), np.array([0.9, 0.5]))
    with pytest.raises(NotADistribution):
        loss_len(_dist([0.5, 0.5]), np.array([[0.5, 0.5, 0.0]]))


def test_loss_mlm_closed_forms(f64):
    vocab = 100
    probs = np.full((2, 3, vocab), 1.0 / vocab)
    targets = np.array([[5, 6, 7], [8, 9, 10]])
    mask = np.array([[1, 0, 1], [0, 1, 0]])
    out = loss_mlm(ad.constant(probs), targets, mask)
    assert out.item() == pytest.approx(math.log(100), abs=1e-9)
    perfect = np.zeros((1, 2, 10))
    perfect[0, 0, 3] = 1.0
    perfect[0, 1, 4] = 1.0
    assert loss_mlm(ad.constant(perfect + 1e-300),
                    np.array([[3, 4]]), np.array([[1, 1]])).item() == \
        pytest.approx(0.0, abs=1e-9)


def test_loss_mlm_ignores_observed_positions(f64):
    rng = ad.seeded_rng(10, "mlmobs")
    probs = rng.dirichlet(np.ones(12), size=(1, 4))
    mask = np.array([[1, 0, 1, 0]])
    base = loss_mlm(ad.constant(probs), np.array([[5, 6, 7, 8]]), mask).item()
    perturbed = loss_mlm(ad.constant(probs), np.array([[5, 11, 7, 2]]),
                         mask).item()
    assert base == pytest.approx(perturbed, abs=1e-12)


def test_loss_mlm_errors(f64):
    probs = ad.constant(np.full((1, 2, 5), 0.2))
    with pytest.raises(IndexOutOfVocab):
        loss_mlm(probs, np.array([[5, 0]]), np.array([[1, 1]]))
    with pytest.raises(EmptySentence):
        loss_mlm(probs, np.array([[1, 2]]), np.array([[0, 0]]))


def test_loss_vis_closed_form_and_degenerate(f64):
    vocab = 100
    probs = np.full((1, 7, vocab), 1.0 / vocab)
    targets = np.array([[MASK] * 7])
    out = loss_vis(ad.constant(probs), targets, np.ones((1, 7)))
    assert out.item() == pytest.approx(math.log(100), abs=1e-9)
    assert out.item() > 0


def test_loss_total_composition(f64):
    a = ad.constant(np.array(1.5))
    b = ad.constant(np.array(2.0))
    c = ad.constant(np.array(3.0))
    assert loss_total(a, b, c, 0.0).item() == pytest.approx(3.5)
    assert loss_total(a, b, c, 0.8).item() == pytest.approx(3.5 + 0.8 * 3.0)
    assert loss_total(None, b, None, 0.8).item() == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# Gradient flow through the full objective
# ---------------------------------------------------------------------------

def test_full_objective_gradients_match_fd(f64):
    cfg = tiny_config()
    model = Model(cfg, seed=21)
    rng = ad.seeded_rng(21, "obj")
    feats = rand_features(cfg, rng)
    l_star = rng.dirichlet(np.ones(cfg.N_max))
    inputs = np.array([[MASK, 6, MASK, 8, 9]])
    targets = np.array([[5, 6, 7, 8, 9]])
    mask_m = np.array([[1, 0, 1, 0, 0]])
    vis_t = np.array([[MASK, 6, MASK, 8, MASK]])
    real = np.ones((1, 5), dtype=np.int64)

    def build():
        R = model.encode(feats)
        l1 = loss_len(model.predict_length(R), l_star)
        l2 = loss_mlm(model.decode(inputs, R), targets, mask_m)
        l3 = loss_vis(model.decode(np.full_like(inputs, 2), R), vis_t, real)
        return loss_total(l1, l2, l3, 0.8)

    assert check_param_grads(build, model.params) < 1e-3


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainingConfig()
    assert cfg.lr_at(0) == pytest.approx(5e-4)
    assert cfg.lr_at(1) == pytest.approx(4.5e-4)
    assert cfg.lr_at(21) > 5e-5
    assert cfg.lr_at(22) == pytest.approx(5e-5)
    assert cfg.lr_at(100) == pytest.approx(5e-5)


def test_training_config_validation():
    with pytest.raises(ShapeMismatch):
        TrainingConfig(beta_low=0.5, beta_high=0.2)
    with pytest.raises(ShapeMismatch):
        TrainingConfig(beta_high=1.5)
    with pytest.raises(ShapeMismatch):
        TrainingConfig(lambda_vis=-0.1)


def test_adam_decoupled_decay_hits_weights_only(f64):
    specs = {"w": ((2, 2), "weight"), "b": ((2,), "bias"),
             "g": ((2,), "ln"), "e": ((2, 2), "embed")}
    params = {n: ad.parameter(np.ones(shape))
              for n, (shape, _) in specs.items()}
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    opt = Adam(params, specs, TrainingConfig(weight_decay=0.1))
    opt.step(lr=1.0)
    assert np.allclose(params["w"].data, 0.9)  # only decay moves it
    for name in ("b", "g", "e"):
        assert np.allclose(params[name].data, 1.0)


def test_batch_builders(f64):
    mlm = build_mlm_batch([
        type("E", (), {"n": 3, "y_star": [5, 6, 7], "mask_positions": [1]})(),
    ])
    assert mlm["inputs"].tolist() == [[5, MASK, 7]]
    assert mlm["mask_matrix"].tolist() == [[0, 1, 0]]
    arb = build_ar_batch([[5, 6], [7, 8, 9]], n_max=10)
    assert arb["inputs"].tolist() == [[3, 5, 6, 0], [3, 7, 8, 9]]
    assert arb["targets"].tolist() == [[5, 6, 4, 0], [7, 8, 9, 4]]
    assert arb["real_matrix"].tolist() == [[1, 1, 1, 0], [1, 1, 1, 1]]
    clipped = build_ar_batch([[5] * 9], n_max=5)
    assert len(clipped["inputs"][0]) == 5  # caption clipped to N_max - 1


# ---------------------------------------------------------------------------
# End-to-end seeded smoke
# ---------------------------------------------------------------------------

def _smoke_corpus():
    spec = SynthSpec(videos_train=30, videos_val=2, videos_test=2,
                     captions_min=2, captions_max=4)
    return synth_generate(spec, seed=11)[0]


def _smoke_model_config(corpus, **kw):
    from nacap.model import ModelConfig
    base = dict(modality_dims=corpus.modality_dims, K=corpus.K,
                vocab_size=len(corpus.vocab), N_max=12, d_m=16, d_h=32,
                H=2, dropout_p=0.0, use_category=True,
                category_count=corpus.category_count)
    base.update(kw)
    return ModelConfig(**base)


def test_loss_decreases_over_first_five_epochs():
    corpus = _smoke_corpus()
    tc = TrainingConfig(epochs=5, seed=2, batch_size=32)
    _, log = train(corpus, _smoke_model_config(corpus), tc, variant="nacf")
    totals = [r["loss_len"] + r["loss_mlm"] + 0.8 * r["loss_vis"]
              for r in log]
    assert all(b < a for a, b in zip(totals, totals[1:]))
    for record in log:
        assert set(record) == {"epoch", "loss_len", "loss_mlm", "loss_vis",
                               "lr", "val_bleu4", "wall_seconds"}


def test_training_determinism_and_variant_equivalence():
    corpus = _smoke_corpus()
    mc = _smoke_model_config(corpus)
    tc = TrainingConfig(epochs=2, seed=4, batch_size=32)
    m1, _ = train(corpus, mc, tc, variant="nacf")
    m2, _ = train(corpus, mc, tc, variant="nacf")
    for name in m1.params:
        assert m1.params[name].data.tobytes() == m2.params[name].data.tobytes()
    # na-b == nacf with lambda_vis forced to 0
    tc0 = TrainingConfig(epochs=2, seed=4, batch_size=32, lambda_vis=0.0)
    nacf0, _ = train(corpus, mc, tc0, variant="nacf")
    nab, _ = train(corpus, mc, tc, variant="na-b")
    for name in nab.params:
        assert nab.params[name].data.tobytes() == nacf0.params[name].data.tobytes()


def test_ar_variants_train_causal():
    corpus = _smoke_corpus()
    mc = _smoke_model_config(corpus, causal=True)
    tc = TrainingConfig(epochs=2, seed=5, batch_size=32)
    arb, log = train(corpus, mc, tc, variant="ar-b")
    assert "lp.W1" not in arb.params
    assert all(r["loss_len"] == 0.0 for r in log)
    assert all(r["loss_vis"] == 0.0 for r in log)
    arbv, logv = train(corpus, mc, tc, variant="ar-b-vis")
    assert any(r["loss_vis"] > 0.0 for r in logv)
    with pytest.raises(ShapeMismatch):
        train(corpus, mc, tc, variant="mystery")


def test_training_log_file(tmp_path):
    corpus = _smoke_corpus()
    tc = TrainingConfig(epochs=2, seed=6, batch_size=32)
    log_path = tmp_path / "log.jsonl"
    train(corpus, _smoke_model_config(corpus), tc, variant="na-b",
          log_path=log_path)
    import json
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert lines[0]["lr"] == pytest.approx(5e-4)
