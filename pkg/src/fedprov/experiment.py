"""Config-driven pipeline: corpus -> pretrained models -> client data -> FL run -> files."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, ModelConfig
from .corpus import Corpus, load_corpus
from .fedsim import (ClientProfile, ExperimentReport, make_spec, prepare_clients, rounds_csv,
                     run_experiment)
from .formats import load_checkpoint, load_datasets, save_checkpoint, save_datasets, save_key
from .lm import ArchConfig, ModelParams, TokenSeq, build_model, pretrain

OUTPUT_ROOT_ENV = "FEDPROV_OUTPUT_ROOT"


@dataclass
class Splits:
    corpus: Corpus
    pretrain: list[TokenSeq]
    pool: list[TokenSeq]
    val: list[TokenSeq]
    test: list[TokenSeq]


def load_splits(cfg: ExperimentConfig) -> Splits:
    c = cfg.corpus
    corpus = load_corpus(c.path, c.doc_length)
    parts = corpus.split({"pretrain": c.pretrain_fraction, "pool": c.pool_fraction,
                          "val": c.val_fraction, "test": c.test_fraction}, seed=c.split_seed)
    if not parts["val"]:
        raise ValueError("validation split is empty; raise corpus.val_fraction or use a larger corpus")
    return Splits(corpus, parts["pretrain"], parts["pool"], parts["val"], parts["test"])


def arch_for(mc: ModelConfig, vocab_size: int) -> ArchConfig:
    return ArchConfig(vocab_size, mc.context_length, mc.hidden, mc.n_layers, mc.embed_dim)


def pretrain_model(mc: ModelConfig, splits: Splits) -> tuple[ModelParams, list[dict]]:
    model = build_model(arch_for(mc, splits.corpus.vocab.size), seed=mc.init_seed)
    docs = splits.pretrain if mc.pretrain_docs is None else splits.pretrain[:mc.pretrain_docs]
    if not docs:
        raise ValueError("pretraining split is empty")
    return pretrain(model, docs, mc.pretrain_epochs, mc.pretrain_lr, mc.pretrain_batch_size,
                    seed=mc.init_seed, eval_set=splits.val)


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """``override`` wins; otherwise ``cfg.output_dir`` under ``$FEDPROV_OUTPUT_ROOT`` (if set)."""
    if override:
        return Path(override)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / cfg.output_dir if root else Path(cfg.output_dir)


def curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    cols = list(curve[0]) if curve else ["epoch", "train_loss"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for row in curve:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "tool": "fedprov",
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": {"fl": cfg.fl.seed, "split": cfg.corpus.split_seed,
                  "generator_init": cfg.generator.init_seed, "global_init": cfg.global_model.init_seed,
                  "aggregator": cfg.aggregator.seed, "watermark_key": cfg.watermark.key},
        "numpy": np.__version__,
        "python": platform.python_version(),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages


def stage_pretrain(cfg: ExperimentConfig, out: Path, splits: Splits | None = None) -> dict[str, ModelParams]:
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(cfg)
    models = {}
    for role, mc in (("generator", cfg.generator), ("global", cfg.global_model)):
        model, curve = pretrain_model(mc, splits)
        save_checkpoint(model, out / f"{role}.ckpt")
        (out / f"{role}_curve.csv").write_text(curve_csv(curve))
        models[role] = model
    write_manifest(out, cfg, "pretrain")
    return models


def stage_generate(cfg: ExperimentConfig, out: Path, generator: ModelParams,
                   splits: Splits | None = None) -> list[ClientProfile]:
    splits = splits or load_splits(cfg)
    spec = make_spec(cfg.watermark)
    clients = prepare_clients(splits.pool, cfg.fl, spec, generator, cfg.corpus.prompt_length)
    out.mkdir(parents=True, exist_ok=True)
    save_key(spec, out / "key.json")
    save_datasets(out / "datasets", splits.corpus.vocab, clients, {"config_hash": cfg.config_hash()})
    return clients


@dataclass
class RunArtifacts:
    report: ExperimentReport
    out: Path


def stage_run(cfg: ExperimentConfig, out: Path, *, splits: Splits | None = None,
              models: dict[str, ModelParams] | None = None, clients: list[ClientProfile] | None = None,
              checkpoint_dir: Path | None = None, dataset_dir: Path | None = None,
              resume: bool = False, dump_updates: bool = False) -> RunArtifacts:
    """Run one experiment and write ``report.json``, ``rounds.csv`` and friends to ``out``.

    Models come from ``models``, else from ``checkpoint_dir``, else are
    pretrained here. Client data comes from ``clients``, else from
    ``dataset_dir``, else is generated here and written under ``out``.
    """
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(cfg)
    if resume:
        # pick up whatever an interrupted invocation already wrote
        if models is None and checkpoint_dir is None and (out / "models" / "global.ckpt").exists():
            checkpoint_dir = out / "models"
        if clients is None and dataset_dir is None and (out / "datasets" / "manifest.json").exists():
            dataset_dir = out / "datasets"
    if models is None and checkpoint_dir is not None:
        models = {r: load_checkpoint(Path(checkpoint_dir) / f"{r}.ckpt") for r in ("generator", "global")}
    if models is None:
        models = stage_pretrain(cfg, out / "models", splits)
    spec = make_spec(cfg.watermark)
    if clients is None and dataset_dir is not None:
        vocab, clients, _ = load_datasets(dataset_dir)
        if vocab != splits.corpus.vocab:
            raise ValueError("dataset vocabulary does not match the corpus")
    if clients is None:
        clients = stage_generate(cfg, out, models["generator"], splits)
    report = run_experiment(cfg.fl, cfg.aggregator, clients, models["global"], splits.val, spec,
                            eval_sets={"test": splits.test} if splits.test else None,
                            alpha=cfg.watermark.alpha, jobs=cfg.jobs, state_dir=out / "state",
                            resume=resume, dump_path=out / "updates.bin" if dump_updates else None,
                            config_hash=cfg.config_hash())
    (out / "report.json").write_text(report.to_json())
    (out / "rounds.csv").write_text(rounds_csv(report.rounds))
    (out / "timings.csv").write_text(
        "round,wall_time_s\n" + "".join(f"{r.round},{r.wall_time:.6f}\n" for r in report.rounds))
    save_checkpoint(report.final_model, out / "final.ckpt")
    write_manifest(out, cfg, "run")
    return RunArtifacts(report, out)


SWEEP_COLUMNS = ("aggregator", "n_watermarking", "eps", "seed", "stopping_round", "er", "ofr",
                 "p_pre", "p_post", "val_loss", "test_loss")


def sweep_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    s = cfg.sweep
    ws = s.n_watermarking or [cfg.fl.n_watermarking]
    aggs = s.aggregators or [cfg.aggregator.kind]
    seeds = s.seeds or [cfg.fl.seed]
    cells = []
    for kind in aggs:
        for w in ws:
            for seed in seeds:
                eps = w / cfg.fl.n_clients
                cells.append(cfg.replace(
                    fl={"n_watermarking": w, "seed": seed},
                    aggregator={"kind": kind, "eps": eps if kind == "robust" else cfg.aggregator.eps},
                    watermark={"key": cfg.watermark.key + seed},
                    sweep={"n_watermarking": [], "aggregators": [], "seeds": []}))
    return cells


def sweep_row(cell: ExperimentConfig, rep: ExperimentReport) -> dict:
    agg = rep.detection.get("aggregated", {})
    pre = rep.pre_detection.get("aggregated", {})
    return {"aggregator": cell.aggregator.kind, "n_watermarking": cell.fl.n_watermarking,
            "eps": cell.fl.eps, "seed": cell.fl.seed, "stopping_round": rep.stopping_round,
            "er": rep.headline["er"], "ofr": rep.headline["ofr"], "p_pre": pre.get("p_value"),
            "p_post": agg.get("p_value"), "val_loss": rep.utility["validation"],
            "test_loss": rep.utility.get("test")}


def stage_sweep(cfg: ExperimentConfig, out: Path, resume: bool = False,
                models: dict[str, ModelParams] | None = None,
                splits: Splits | None = None) -> list[dict]:
    """One run per sweep cell (shared pretrained models), plus ``sweep.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(cfg)
    if models is None and resume and (out / "models" / "global.ckpt").exists():
        models = {r: load_checkpoint(out / "models" / f"{r}.ckpt") for r in ("generator", "global")}
    if models is None:
        models = stage_pretrain(cfg, out / "models", splits)
    rows = []
    for cell in sweep_cells(cfg):
        name = f"{cell.aggregator.kind}_w{cell.fl.n_watermarking}_s{cell.fl.seed}"
        art = stage_run(cell, out / name, splits=splits, models=models, resume=resume)
        rows.append(sweep_row(cell, art.report))
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    (out / "sweep.csv").write_text(buf.getvalue())
    write_manifest(out, cfg, "run-sweep", {"cells": len(rows)})
    return rows


def stage_bench(cfg: ExperimentConfig, out: Path) -> dict:
    """Corrupted-Gaussian benchmark of the robust filter; writes ``bench.csv`` and ``bench_summary.json``."""
    from dataclasses import replace

    from .bench import beta_trend, bench_csv, run_bench, time_scaling

    out.mkdir(parents=True, exist_ok=True)
    b = cfg.bench
    agg = replace(cfg.aggregator, kind="robust", eps=b.eps)
    rows = run_bench(b, agg, b.use_bound)
    (out / "bench.csv").write_text(bench_csv(rows))
    betas = {str(d): [r.beta_hat for r in rows if r.d == d] for d in b.dims}
    summary = {
        "use_bound": b.use_bound,
        "beta_hat_max": {d: max(v) for d, v in betas.items()},
        "fraction_beta_le_9": {d: float(np.mean(np.array(v) <= 9.0)) for d, v in betas.items()},
        "beta_trend": beta_trend(rows),
        "time_scaling": time_scaling(rows),
    }
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, cfg, "bench-agg")
    return summary
