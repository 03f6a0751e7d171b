"""The captioning network: highway input-embedding encoder, length predictor
and a bidirectional self-attention decoder, plus the causal (autoregressive)
variant used as baseline and rescoring teacher.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import (
    LengthExceedsMax,
    ShapeMismatch,
    UnknownCategory,
    UnknownToken,
)

# Reserved vocabulary slots shared by every model/corpus in the package.
PAD, MASK, VISUAL, BEGIN, END = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["<pad>", "[mask]", "[visual]", "<s>", "</s>"]
FIRST_WORD_ID = len(RESERVED_TOKENS)

_NEG_INF = -1e9


@dataclass
class ModelConfig:
    modality_dims: tuple  # feature dim per modality (1 or 2 entries)
    K: int
    vocab_size: int
    N_max: int = 20
    d_m: int = 512
    d_h: int = 2048
    H: int = 8
    decoder_layers: int = 1
    dropout_p: float = 0.5
    causal: bool = False
    use_src_embed: bool = True
    use_category: bool = False
    category_count: int = 0

    def __post_init__(self):
        self.modality_dims = tuple(int(d) for d in self.modality_dims)
        if not 1 <= len(self.modality_dims) <= 2:
            raise ShapeMismatch("modalities must be 1 or 2")
        if self.d_m % self.H != 0:
            raise ShapeMismatch(f"d_m={self.d_m} not divisible by H={self.H}")
        if self.N_max < 4:
            raise ShapeMismatch("N_max must be >= 4")
        if self.use_category and self.category_count < 1:
            raise ShapeMismatch("use_category requires category_count >= 1")

    @property
    def d_k(self):
        return self.d_m // self.H

    def to_dict(self):
        d = asdict(self)
        d["modality_dims"] = list(self.modality_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_specs(config: ModelConfig):
    """Ordered name -> (shape, kind) map of every trainable tensor.

    kind is one of weight / bias / embed / ln; only `weight` receives
    weight decay during training.
    """
    specs = {}
    dm, dh = config.d_m, config.d_h
    for m, dv in enumerate(config.modality_dims):
        specs[f"enc{m}.W_e1"] = ((dv, dm), "weight")
        specs[f"enc{m}.b_e1"] = ((dm,), "bias")
        specs[f"enc{m}.W_e2"] = ((dm, dm), "weight")
        specs[f"enc{m}.b_e2"] = ((dm,), "bias")
        specs[f"enc{m}.W_e3"] = ((dm, dm), "weight")
        specs[f"enc{m}.b_e3"] = ((dm,), "bias")
    if config.use_category:
        specs["cat.table"] = ((config.category_count, dm), "embed")
    if not config.causal:
        specs["lp.W1"] = ((dm, dm), "weight")
        specs["lp.W2"] = ((dm, config.N_max), "weight")
    specs["emb.tok"] = ((config.vocab_size, dm), "embed")
    specs["emb.pos"] = ((config.N_max, dm), "embed")
    for layer in range(config.decoder_layers):
        for sub in ("self", "inter"):
            base = f"dec{layer}.{sub}"
            for w in ("W_Q", "W_K", "W_V", "W_O"):
                specs[f"{base}.{w}"] = ((dm, dm), "weight")
            specs[f"{base}.ln_g"] = ((dm,), "ln")
            specs[f"{base}.ln_b"] = ((dm,), "ln")
        specs[f"dec{layer}.ffn.W1"] = ((dm, dh), "weight")
        specs[f"dec{layer}.ffn.W2"] = ((dh, dm), "weight")
        specs[f"dec{layer}.ffn.ln_g"] = ((dm,), "ln")
        specs[f"dec{layer}.ffn.ln_b"] = ((dm,), "ln")
    specs["dec.W_PJ"] = ((dm, config.vocab_size), "weight")
    return specs


def init_params(config: ModelConfig, seed: int):
    """Fresh parameter store: uniform(-0.1, 0.1) embeddings, scaled-normal
    weight matrices, zero biases, identity layer norms."""
    params = {}
    for name, (shape, kind) in param_specs(config).items():
        rng = ad.seeded_rng(seed, "init", name)
        if kind == "embed":
            data = rng.uniform(-0.1, 0.1, size=shape)
        elif kind == "weight":
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
        elif kind == "ln":
            data = np.ones(shape) if name.endswith("ln_g") else np.zeros(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.parameter(data)
    return params


class Model:
    """A configured network plus its parameter store."""

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self._validate_params()

    def _validate_params(self):
        specs = param_specs(self.config)
        for name, (shape, _) in specs.items():
            if name not in self.params:
                raise ShapeMismatch(f"missing parameter {name}")
            got = tuple(self.params[name].data.shape)
            if got != tuple(shape):
                raise ShapeMismatch(f"{name}: expected {shape}, got {got}")
        extra = set(self.params) - set(specs)
        if extra:
            raise ShapeMismatch(f"unexpected parameters {sorted(extra)}")

    # -- encoder -----------------------------------------------------------

    def encode(self, features, categories=None):
        """features: list (per modality) of (B, K, d_v) arrays -> (B, S, d_m)."""
        cfg = self.config
        if len(features) != len(cfg.modality_dims):
            raise ShapeMismatch(
                f"expected {len(cfg.modality_dims)} modalities, got {len(features)}")
        rows = []
        batch = None
        for m, (dv, feats) in enumerate(zip(cfg.modality_dims, features)):
            arr = np.asarray(feats, dtype=ad.default_dtype())
            if arr.ndim == 2:
                arr = arr[None]
            if arr.ndim != 3 or arr.shape[1] != cfg.K or arr.shape[2] != dv:
                raise ShapeMismatch(
                    f"modality {m}: expected (B, {cfg.K}, {dv}), got {arr.shape}")
            if batch is None:
                batch = arr.shape[0]
            elif arr.shape[0] != batch:
                raise ShapeMismatch("modalities disagree on batch size")
            x = ad.constant(arr)
            p = self.params
            xbar = ad.add(ad.matmul(x, p[f"enc{m}.W_e1"]), p[f"enc{m}.b_e1"])
            xhat = ad.tanh(ad.add(ad.matmul(xbar, p[f"enc{m}.W_e2"]), p[f"enc{m}.b_e2"]))
            g = ad.sigmoid(ad.add(ad.matmul(xbar, p[f"enc{m}.W_e3"]), p[f"enc{m}.b_e3"]))
            one_minus = ad.add(ad.scale(g, -1.0), 1.0)
            rows.append(ad.add(ad.mul(g, xbar), ad.mul(one_minus, xhat)))
        R = rows[0] if len(rows) == 1 else ad.concat(rows, axis=1)
        if self.config.use_category:
            if categories is None:
                raise UnknownCategory("model expects category tags")
            ids = np.asarray(categories, dtype=np.int64).reshape(-1)
            if ids.shape[0] != batch:
                raise ShapeMismatch("category batch size mismatch")
            if ids.size and (ids.min() < 0 or ids.max() >= self.config.category_count):
                raise UnknownCategory(f"category id out of range: {ids}")
            row = ad.embedding_lookup(self.params["cat.table"], ids[:, None])
            R = ad.concat([R, row], axis=1)
        return R

    # -- length predictor ---------------------------------------------------

    def predict_length(self, R):
        """(B, S, d_m) -> (B, N_max) probability rows (index j = length j+1)."""
        if self.config.causal:
            raise ShapeMismatch("causal model has no length predictor")
        pooled = ad.mean_pool(R, axis=-2)
        h = ad.relu(ad.matmul(pooled, self.params["lp.W1"]))
        return ad.softmax(ad.matmul(h, self.params["lp.W2"]), axis=-1)

    # -- decoder ------------------------------------------------------------

    def input_embed(self, tokens, R):
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        n = ids.shape[1]
        if n > cfg.N_max:
            raise LengthExceedsMax(f"N={n} > N_max={cfg.N_max}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise UnknownToken("token id out of vocabulary")
        e = ad.embedding_lookup(self.params["emb.tok"], ids)
        e = ad.add(e, ad.embedding_lookup(self.params["emb.pos"], np.arange(n)))
        if cfg.use_src_embed:
            src = ad.mean_pool(R, axis=-2)  # (B, d_m)
            e = ad.add(e, ad.reshape(src, (src.data.shape[0], 1, cfg.d_m)))
        return e

    def _attention_mask(self, pad_mask, n, batch):
        """Additive (B, 1, n, n) self-attention mask."""
        mask = np.zeros((batch, 1, n, n), dtype=ad.default_dtype())
        if self.config.causal:
            tri = np.triu(np.full((n, n), _NEG_INF, dtype=ad.default_dtype()), k=1)
            mask += tri[None, None]
        if pad_mask is not None:
            keys = np.asarray(pad_mask, dtype=bool)
            if keys.ndim == 1:
                keys = keys[None]
            mask = mask + np.where(keys, 0.0, _NEG_INF).astype(
                ad.default_dtype())[:, None, None, :]
        return mask

    def _split_heads(self, x):
        b, n, _ = x.data.shape
        cfg = self.config
        return ad.transpose(ad.reshape(x, (b, n, cfg.H, cfg.d_k)), (0, 2, 1, 3))

    def _mha(self, base, q_in, kv_in, mask, train, rng):
        cfg = self.config
        p = self.params
        q = self._split_heads(ad.matmul(q_in, p[f"{base}.W_Q"]))
        k = self._split_heads(ad.matmul(kv_in, p[f"{base}.W_K"]))
        v = self._split_heads(ad.matmul(kv_in, p[f"{base}.W_V"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(cfg.d_k))
        if mask is not None:
            scores = ad.add(scores, ad.constant(mask))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)  # (B, H, Nq, d_k)
        b, _, nq, _ = ctx.data.shape
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, nq, cfg.d_m))
        out = ad.matmul(merged, p[f"{base}.W_O"])
        out = ad.dropout(out, cfg.dropout_p, train, rng)
        return ad.layer_norm(ad.add(out, q_in), p[f"{base}.ln_g"], p[f"{base}.ln_b"])

    def _ffn(self, base, x, train, rng):
        p = self.params
        h = ad.relu(ad.matmul(x, p[f"{base}.W1"]))
        out = ad.matmul(h, p[f"{base}.W2"])
        out = ad.dropout(out, self.config.dropout_p, train, rng)
        return ad.layer_norm(ad.add(out, x), p[f"{base}.ln_g"], p[f"{base}.ln_b"])

    def decode(self, tokens, R, train=False, rng=None, pad_mask=None):
        """Per-position vocabulary distributions, (B, N, vocab_size).

        pad_mask (B, N) marks real positions True; padded keys are excluded
        from self-attention so padded batches equal per-example decoding.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        batch, n = ids.shape
        x = self.input_embed(ids, R)
        mask = self._attention_mask(pad_mask, n, batch)
        for layer in range(self.config.decoder_layers):
            x = self._mha(f"dec{layer}.self", x, x, mask, train, rng)
            x = self._mha(f"dec{layer}.inter", x, R, None, train, rng)
            x = self._ffn(f"dec{layer}.ffn", x, train, rng)
        logits = ad.matmul(x, self.params["dec.W_PJ"])
        return ad.softmax(logits, axis=-1)

    # -- persistence ---------------------------------------------------------

    def save(self, path, vocab_hash="", meta=None):
        ad.save_params(path, self.params)
        sidecar = {"config": self.config.to_dict(), "vocab_hash": vocab_hash,
                   "meta": meta or {}}
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, expect_vocab_hash=None):
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        if expect_vocab_hash is not None and sidecar["vocab_hash"] != expect_vocab_hash:
            raise UnknownToken("checkpoint was trained with a different vocabulary")
        config = ModelConfig.from_dict(sidecar["config"])
        arrays = ad.load_params(path)
        params = {name: ad.parameter(arr) for name, arr in arrays.items()}
        model = cls(config, params=params)
        model.sidecar = sidecar
        return model


def vocab_hash(tokens):
    """Stable fingerprint of an ordered token list."""
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()
