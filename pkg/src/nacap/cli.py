"""Operator entry points: synth / train / decode / eval / bench.

One YAML experiment configuration drives every subcommand; `-O key.path=value`
overrides individual entries so runs stay reproducible from a single document.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import click
import numpy as np
import yaml

from . import __version__
from . import autodiff as ad
from .bench import BenchEntry, bench_rows, worker_threads
from .corpus import (
    SynthSpec,
    categories_of,
    features_of,
    load_corpus,
    save_corpus,
    synth_generate,
)
from .decoding import DecodeConfig, Decoder, ar_caption
from .errors import ConfigError, InvalidSpec, MissingFile, NacapError
from .metrics import (
    bleu,
    latency_summary,
    metric_report,
    per_position_vocab_usage,
    unique_ngrams_by_category,
)
from .model import Model, ModelConfig
from .training import Adam, TrainingConfig, VARIANTS, train

_MODEL_KEYS = {"N_max", "d_m", "d_h", "H", "decoder_layers", "dropout_p",
               "use_src_embed", "use_category"}
_TRAINING_KEYS = {f for f in TrainingConfig.__dataclass_fields__} - {"seed"}
_DECODE_KEYS = set(DecodeConfig.__dataclass_fields__)
_BENCH_KEYS = {"beam_sizes", "iterations", "ar_beam", "warmup", "limit"}


@dataclass
class ExperimentConfig:
    """The single configuration document; every section fully validated."""
    seed: int = 0
    out_dir: str = "runs"
    corpus: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    teacher: str | None = None

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**doc)
        if "manifest" not in cfg.corpus:
            raise ConfigError("corpus.manifest is required")
        for section, keys in (("corpus", {"manifest"}),
                              ("model", _MODEL_KEYS),
                              ("training", _TRAINING_KEYS),
                              ("decode", _DECODE_KEYS),
                              ("bench", _BENCH_KEYS)):
            extra = set(getattr(cfg, section)) - keys
            if extra:
                raise ConfigError(f"unknown {section} keys: {sorted(extra)}")
        return cfg

    def model_config(self, corpus, causal=False):
        return ModelConfig(
            modality_dims=corpus.modality_dims, K=corpus.K,
            vocab_size=len(corpus.vocab), causal=causal,
            category_count=corpus.category_count, **self.model)

    def training_config(self):
        return TrainingConfig(seed=self.seed, **self.training)

    def decode_config(self, **overrides):
        merged = dict(self.decode)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return DecodeConfig(**merged)


def load_experiment(path, overrides=()):
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key.path=value")
        key, _, raw = ov.partition("=")
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {ov!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(doc)


def _load_corpus_for(cfg: ExperimentConfig):
    n_max = cfg.model.get("N_max", ModelConfig.__dataclass_fields__["N_max"].default)
    return load_corpus(cfg.corpus["manifest"], n_max=n_max)


# ---------------------------------------------------------------------------
# click group
# ---------------------------------------------------------------------------

@click.group(name="nacap")
@click.version_option(__version__)
def cli():
    """Non-autoregressive coarse-to-fine video captioning toolkit."""


_overrides = click.option("-O", "--override", "overrides", multiple=True,
                          metavar="KEY.PATH=VALUE",
                          help="Override a config entry (YAML-parsed value).")


@cli.command()
@click.argument("spec_path", required=False, type=str)
@click.option("--out", "out_dir", required=True, type=str,
              help="Output directory for the corpus files.")
@click.option("--seed", default=0, show_default=True, type=int)
def synth(spec_path, out_dir, seed):
    """Generate the synthetic scene corpus (manifest + captions + features)."""
    if spec_path is not None:
        if not os.path.exists(spec_path):
            raise MissingFile(spec_path)
        with open(spec_path, "r", encoding="utf-8") as fh:
            spec = SynthSpec.from_dict(yaml.safe_load(fh) or {})
    else:
        spec = SynthSpec()
    corpus, scenes = synth_generate(spec, seed)
    manifest = save_corpus(corpus, out_dir)
    with open(os.path.join(out_dir, "scenes.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"seed": seed, "generator": "nacap-synth"},
                            sort_keys=True) + "\n")
        for vid in sorted(scenes):
            fh.write(json.dumps({"video_id": vid, **scenes[vid]},
                                sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "generation.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "spec": spec.__dict__ | {
            "modalities": list(spec.modalities)}}, fh, indent=2, sort_keys=True)
    click.echo(f"wrote {manifest} ({len(corpus.records)} videos, "
               f"vocab {len(corpus.vocab)})")


@cli.command(name="train")
@click.argument("config_path", type=str)
@click.option("--variant", default="nacf", show_default=True,
              type=click.Choice(VARIANTS))
@click.option("--resume", is_flag=True,
              help="Continue from an existing checkpoint and its schedule.")
@click.option("--val-bleu", is_flag=True,
              help="Log BLEU@4 on the val split each epoch (parallel variants).")
@_overrides
def train_cmd(config_path, variant, resume, val_bleu, overrides):
    """Train a model variant and write checkpoint + JSONL log."""
    cfg = load_experiment(config_path, overrides)
    corpus = _load_corpus_for(cfg)
    causal = variant.startswith("ar-b")
    model_cfg = cfg.model_config(corpus, causal=causal)
    train_cfg = cfg.training_config()
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, f"{variant}.ckpt")
    log_path = os.path.join(cfg.out_dir, f"{variant}.log.jsonl")

    from .model import param_specs
    start_epoch = 0
    if resume:
        if not os.path.exists(ckpt):
            raise MissingFile(ckpt)
        model = Model.load(ckpt, expect_vocab_hash=corpus.vocab.hash())
        start_epoch = int(model.sidecar["meta"]["epochs_done"])
        optimizer = Adam(model.params, param_specs(model_cfg), train_cfg)
        opt_path = ckpt + ".opt"
        if os.path.exists(opt_path):
            optimizer.load_state_arrays(ad.load_params(opt_path))
    else:
        model = Model(model_cfg, seed=train_cfg.seed)
        optimizer = Adam(model.params, param_specs(model_cfg), train_cfg)

    val_fn = None
    if val_bleu and not causal:
        val_records = corpus.split("val")

        def val_fn(m):
            if not val_records:
                return None
            decoder = Decoder(m)
            dcfg = DecodeConfig(algorithm="mp", use_template=True, T=5, B=1)
            hyps, refs = [], []
            for rec in val_records:
                out = decoder.caption(features_of([rec]), dcfg,
                                      categories=categories_of([rec]))
                hyps.append(corpus.vocab.decode(out["tokens"]))
                refs.append(rec.captions)
            return bleu(hyps, refs)[3]

    model, log = train(corpus, model_cfg, train_cfg, variant=variant,
                       log_path=log_path, start_epoch=start_epoch,
                       model=model, optimizer=optimizer, val_bleu_fn=val_fn)
    meta = {"variant": variant, "seed": cfg.seed,
            "epochs_done": train_cfg.epochs, "training": train_cfg.to_dict()}
    model.save(ckpt, vocab_hash=corpus.vocab.hash(), meta=meta)
    ad.save_params(ckpt + ".opt", optimizer.state_arrays())
    last = log[-1] if log else {}
    click.echo(f"wrote {ckpt} (epochs {start_epoch}..{train_cfg.epochs - 1}, "
               f"final loss_mlm {last.get('loss_mlm', float('nan')):.4f})")


@cli.command()
@click.argument("config_path", type=str)
@click.argument("checkpoint", type=str)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_path", required=True, type=str)
@click.option("--algo", type=click.Choice(["mp", "ef", "l2r"]), default=None)
@click.option("--template", type=click.Choice(["on", "off"]), default=None)
@click.option("--T", "t_iters", type=int, default=None)
@click.option("--q", type=int, default=None)
@click.option("--B", "beam", type=int, default=None)
@click.option("--rescore/--no-rescore", "rescore", default=None)
@click.option("--refine/--no-refine", "refine", default=None)
@click.option("--fixed-T", "fixed_t", type=int, default=None)
@click.option("--teacher", "teacher_path", type=str, default=None)
@click.option("--trace", is_flag=True,
              help="Record per-iteration traces and a text walkthrough.")
@click.option("--limit", type=int, default=None,
              help="Decode at most this many videos.")
@_overrides
def decode(config_path, checkpoint, split, out_path, algo, template, t_iters,
           q, beam, rescore, refine, fixed_t, teacher_path, trace, limit,
           overrides):
    """Decode a split to captions JSONL (plus optional trace walkthrough)."""
    cfg = load_experiment(config_path, overrides)
    dcfg = cfg.decode_config(
        algorithm=algo,
        use_template=None if template is None else template == "on",
        T=t_iters, q=q, B=beam, use_rescoring=rescore,
        refine_visual=refine, fixed_T=fixed_t,
        keep_trace=True if trace else None)
    teacher_path = teacher_path or cfg.teacher
    if dcfg.use_rescoring and teacher_path is None:
        raise ConfigError("use_rescoring requires --teacher (or config teacher:)")

    corpus = _load_corpus_for(cfg)
    model = Model.load(checkpoint, expect_vocab_hash=corpus.vocab.hash())
    teacher = None
    if teacher_path is not None:
        teacher = Model.load(teacher_path, expect_vocab_hash=corpus.vocab.hash())
    records = corpus.split(split)
    if limit is not None:
        records = records[:limit]

    results = _decode_records(model, teacher, records, dcfg)

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        header = {"seed": cfg.seed, "checkpoint": checkpoint, "split": split,
                  "decode": dcfg.to_dict(), "teacher": teacher_path}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec, out in zip(records, results):
            row = {
                "video_id": rec.video_id,
                "caption": " ".join(corpus.vocab.decode(out["tokens"])),
                "length": out["length"],
                "score": out["score"],
                "passes": out["passes"],
                "encode_ms": out.get("encode_ms", 0.0),
                "wall_ms": out["wall_ms"],
            }
            if trace:
                row["trace"] = out.get("trace")
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if trace:
        with open(out_path + ".trace.txt", "w", encoding="utf-8") as fh:
            for rec, out in zip(records, results):
                fh.write(_render_trace(rec.video_id, out, corpus.vocab))
    click.echo(f"wrote {out_path} ({len(results)} captions)")


def _decode_records(model, teacher, records, dcfg):
    """Per-video decoding, parallelized over NACF_THREADS workers with a
    deterministic (input-order) reduction."""
    is_ar = model.config.causal

    def one(rec):
        feats = features_of([rec])
        cats = categories_of([rec])
        if is_ar:
            return ar_caption(model, feats, beam_size=dcfg.B, categories=cats,
                              keep_trace=dcfg.keep_trace)
        return Decoder(model, teacher).caption(feats, dcfg, categories=cats)

    workers = worker_threads()
    if workers <= 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, records))


def _render_trace(video_id, result, vocab):
    """Human-readable per-iteration walkthrough of the first candidate."""
    lines = [f"== {video_id} (lengths {result.get('lengths')}) =="]
    traces = result.get("trace") or []
    if traces and isinstance(traces[0], list):
        steps = traces[0]
    else:
        steps = [{"step": f"ar:{t['step']}",
                  "tokens": t["beam"][0], "observed": None}
                 for t in traces]
    for snap in steps:
        words = []
        for i, tok in enumerate(snap["tokens"]):
            w = vocab.word(tok)
            if snap.get("observed") is not None and not snap["observed"][i]:
                w = f"({w})"
            words.append(w)
        lines.append(f"  {snap['step']:>10}: {' '.join(words)}")
    return "\n".join(lines) + "\n\n"


@cli.command(name="eval")
@click.argument("captions_path", type=str)
@click.argument("config_path", type=str)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", required=True, type=str)
@_overrides
def eval_cmd(captions_path, config_path, split, out_dir, overrides):
    """Score a captions file: pretty JSON + flat CSV + figures."""
    cfg = load_experiment(config_path, overrides)
    corpus = _load_corpus_for(cfg)
    if not os.path.exists(captions_path):
        raise MissingFile(captions_path)
    rows, header = [], {}
    with open(captions_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "video_id" not in rec:
                header = rec
                continue
            rows.append(rec)
    by_id = {r["video_id"]: r for r in rows}

    records = corpus.split(split)
    hyps, refs, cats = [], [], []
    for rec in records:
        if rec.video_id not in by_id:
            raise NacapError(f"{captions_path}: missing caption for {rec.video_id}")
        hyps.append(by_id[rec.video_id]["caption"].split())
        refs.append(rec.captions)
        cats.append(rec.category if rec.category is not None else 0)

    train_caps = [c for r in corpus.split("train") for c in r.captions]
    traces = None
    if any("trace" in r and r["trace"] for r in rows):
        traces = []
        for rec in records:
            per_cand = by_id[rec.video_id].get("trace") or []
            traces.append([[corpus.vocab.decode(s["tokens"]) for s in cand]
                           for cand in per_cand])
    latency = latency_summary([r["wall_ms"] for r in rows],
                              [r["passes"] for r in rows])
    report = metric_report(hyps, refs, training_captions=train_caps,
                           vocab_words=corpus.vocab.words,
                           decode_traces=traces, latency=latency)
    report["seed"] = cfg.seed
    report["split"] = split
    report["unique_4grams_by_category"] = {
        str(k): v for k, v in unique_ngrams_by_category(
            [" ".join(h) for h in hyps], cats).items()}

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in sorted(_flatten(report).items()):
            writer.writerow([key, value])

    from . import plots
    n_max = cfg.model.get("N_max", 20)
    usage = per_position_vocab_usage(train_caps, corpus.vocab.words, n_max)
    plots.per_position_usage(usage, os.path.join(out_dir, "per_position_usage.svg"),
                             label=f"training captions ({split} eval run)")
    if traces:
        matrix = _refinement_matrix(rows, n_max)
        if matrix is not None:
            plots.refinement_heatmap(
                matrix, os.path.join(out_dir, "refinement_heatmap.svg"),
                title=header.get("decode", {}).get("algorithm", ""))
    click.echo(json.dumps({"bleu4": report["bleu"]["B4"],
                           "rouge_l": report["rouge_l"],
                           "cider_d": report["cider_d"]}, sort_keys=True))


def _flatten(doc, prefix=""):
    flat = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, list):
            flat[name] = " ".join(str(v) for v in value)
        else:
            flat[name] = value
    return flat


def _refinement_matrix(rows, n_max):
    """P(position n committed at iteration t) over the first candidates."""
    counts = {}
    total = 0
    for row in rows:
        trace = row.get("trace")
        if not trace:
            continue
        steps = trace[0]
        prev = None
        total += 1
        for t, snap in enumerate(steps):
            obs = np.asarray(snap["observed"], dtype=bool)
            new = obs if prev is None else (obs & ~prev)
            prev = obs
            for pos in np.flatnonzero(new):
                counts[(t, int(pos))] = counts.get((t, int(pos)), 0) + 1
    if not counts or not total:
        return None
    t_max = max(t for t, _ in counts) + 1
    p_max = min(max(p for _, p in counts) + 1, n_max)
    matrix = np.zeros((t_max, p_max))
    for (t, pos), c in counts.items():
        if pos < p_max:
            matrix[t, pos] = c / total
    return matrix


@cli.command()
@click.argument("config_path", type=str)
@click.argument("checkpoint", type=str)
@click.option("--teacher", "teacher_path", type=str, default=None)
@click.option("--split", default="test", show_default=True)
@click.option("--limit", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=str)
@_overrides
def bench(config_path, checkpoint, teacher_path, split, limit, out_dir,
          overrides):
    """Latency grid -> CSV (config, passes, mean_ms, p50, p95, speedup) + SVG."""
    cfg = load_experiment(config_path, overrides)
    if cfg.decode.get("keep_trace"):
        raise ConfigError("benchmarking refuses to run with trace logging on")
    corpus = _load_corpus_for(cfg)
    model = Model.load(checkpoint, expect_vocab_hash=corpus.vocab.hash())
    teacher_path = teacher_path or cfg.teacher
    teacher = None
    if teacher_path is not None:
        teacher = Model.load(teacher_path, expect_vocab_hash=corpus.vocab.hash())

    beam_sizes = cfg.bench.get("beam_sizes", [1, 4, 6])
    iterations = cfg.bench.get("iterations", [1, 3, 5])
    ar_beam = cfg.bench.get("ar_beam", 5)
    warmup = cfg.bench.get("warmup", 2)
    limit = limit if limit is not None else cfg.bench.get("limit")

    records = corpus.split(split)
    if limit is not None:
        records = records[:limit]

    entries = []
    base = dict(cfg.decode)
    base.pop("keep_trace", None)
    for b in beam_sizes:
        for t in iterations:
            merged = dict(base)
            merged.update({"T": t, "B": b, "algorithm": "mp",
                           "use_template": True})
            entries.append(BenchEntry(label=f"CT-MP(B={b},T={t})", kind="na",
                                      decode=DecodeConfig(**merged)))
    reference_label = None
    if teacher is not None:
        reference_label = f"AR-B(B={ar_beam})"
        entries.append(BenchEntry(label=reference_label, kind="ar",
                                  beam_size=ar_beam))
        if ar_beam != 1:
            entries.append(BenchEntry(label="AR-B(B=1)", kind="ar", beam_size=1))

    rows, all_results = bench_rows(entries, model, teacher, records,
                                   warmup=warmup, reference_label=reference_label)
    refs = {r.video_id: r.captions for r in records}
    from .metrics import cider_d
    for entry, row in zip(entries, rows):
        results = all_results[entry.label]
        hyps = [corpus.vocab.decode(r["tokens"]) for r in results]
        row["cider_d"] = cider_d(hyps, [refs[r.video_id] for r in records])

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "bench.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "passes", "mean_ms", "p50", "p95",
                         "speedup", "encode_mean_ms", "cider_d", "pass_law_ok"])
        for row in rows:
            writer.writerow([row["config"], row["passes_mean"], row["mean_ms"],
                             row["p50_ms"], row["p95_ms"], row["speedup"],
                             row["encode_mean_ms"], row["cider_d"],
                             row["pass_law_ok"]])
    from . import plots
    plots.speedup_vs_cider(rows, os.path.join(out_dir, "bench.svg"))
    bad = [r["config"] for r in rows if not r["pass_law_ok"]]
    if bad:
        raise NacapError(f"pass-count law violated for: {bad}")
    click.echo(f"wrote {csv_path} ({len(rows)} configs, "
               f"seed {cfg.seed}, threads {worker_threads()})")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except (ConfigError, InvalidSpec, MissingFile) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except NacapError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
