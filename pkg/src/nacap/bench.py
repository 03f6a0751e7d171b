"""Latency benchmarking: per-example decoding without minibatching, with
warmup runs excluded and analytic pass-count verification."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .corpus import categories_of, features_of
from .decoding import DecodeConfig, Decoder, ar_caption, expected_passes
from .errors import ConfigError
from .metrics import latency_summary


def worker_threads():
    """NACF_THREADS caps worker threads; benchmarks default to 1."""
    return max(int(os.environ.get("NACF_THREADS", "1")), 1)


@dataclass
class BenchEntry:
    label: str
    kind: str                   # "na" or "ar"
    decode: DecodeConfig | None = None
    beam_size: int = 5


def run_entry(entry: BenchEntry, model, teacher, records, warmup=2):
    """Time one configuration over the given records, one video at a time."""
    if entry.kind == "na" and entry.decode is None:
        raise ConfigError(f"{entry.label}: missing decode config")
    if entry.kind == "na" and entry.decode.keep_trace:
        raise ConfigError("benchmarking refuses to run with trace logging on")
    results = []
    todo = records[:warmup] + records
    for i, rec in enumerate(todo):
        feats = features_of([rec])
        cats = categories_of([rec])
        if entry.kind == "ar":
            out = ar_caption(teacher, feats, beam_size=entry.beam_size,
                             categories=cats)
            out["expected_passes"] = len(out["tokens"])
        else:
            decoder = Decoder(model, teacher)
            out = decoder.caption(feats, entry.decode, categories=cats)
            cfg = entry.decode
            expected = []
            for si, n in enumerate(out["lengths"]):
                u = _template_observed_count(decoder, feats, cats, n, cfg)
                expected.append(expected_passes(cfg, n, u)
                                + (1 if cfg.use_rescoring else 0))
            out["expected_passes"] = expected
        if i >= warmup:
            results.append(out)
    return results


def _template_observed_count(decoder, feats, cats, n, cfg):
    if not cfg.use_template:
        return 0
    R = decoder.model.encode(feats, cats)
    tokens, _ = decoder.generate_template(R, n)
    from .model import MASK
    return int((tokens != MASK).sum())


def bench_rows(entries, model, teacher, records, warmup=2,
               reference_label=None):
    """CSV-ready rows: one per configuration, plus a speedup column relative
    to the reference entry (by convention the beam-5 autoregressive run)."""
    all_results = {}
    for entry in entries:
        all_results[entry.label] = run_entry(entry, model, teacher, records,
                                             warmup=warmup)
    rows = []
    ref_mean = None
    if reference_label is not None:
        ref = latency_summary(
            [r["wall_ms"] for r in all_results[reference_label]],
            [_scalar_passes(r) for r in all_results[reference_label]])
        ref_mean = ref["mean_ms"]
    for entry in entries:
        results = all_results[entry.label]
        summary = latency_summary([r["wall_ms"] for r in results],
                                  [_scalar_passes(r) for r in results])
        pass_law_ok = all(_passes_match(r) for r in results)
        rows.append({
            "config": entry.label,
            "passes_mean": summary["passes_mean"],
            "mean_ms": summary["mean_ms"],
            "p50_ms": summary["p50_ms"],
            "p95_ms": summary["p95_ms"],
            "encode_mean_ms": float(np.mean([r.get("encode_ms", 0.0)
                                             for r in results])),
            "speedup": (ref_mean / summary["mean_ms"]) if ref_mean else float("nan"),
            "pass_law_ok": pass_law_ok,
        })
    return rows, all_results


def _scalar_passes(result):
    p = result["passes"]
    return p if np.isscalar(p) else float(np.mean(p))


def _passes_match(result):
    expected = result["expected_passes"]
    if isinstance(expected, list):
        return result["passes_per_candidate"] == expected
    return result["passes"] == expected
