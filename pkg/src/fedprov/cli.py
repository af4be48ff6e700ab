"""Command-line entry point.

    fedprov pretrain  [--config F | --preset P] [--seed S] [--out DIR]
    fedprov generate  --checkpoint DIR [--key FILE] ...
    fedprov run       [--checkpoint DIR] [--datasets DIR] [--aggregator average|robust]
                      [--dump-updates] [--resume] [--jobs J] ...
    fedprov bench-agg ...
    fedprov keygen    --scheme kgw|kth --out FILE [--key-seed S]

Exit status: 0 success, 2 configuration or input error, 3 numerical abort,
1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import secrets
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, PRESETS, load_config
from .formats import FormatError, load_checkpoint, load_key, save_key
from .lm import NumericalError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("fedprov")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config (overrides the preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")
    p.add_argument("--seed", type=int, help="seed for clients, aggregator and benchmark")
    p.add_argument("--jobs", type=int, help="worker threads for client training")
    p.add_argument("--out", type=Path, help="output directory (default: $FEDPROV_OUTPUT_ROOT/<output_dir>/<name>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprov", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the generator and the initial global model")
    _common(p)

    p = sub.add_parser("generate", help="write watermarked / clean client datasets")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="directory holding generator.ckpt")
    p.add_argument("--key", type=Path, help="watermark key file (default: derived from the config)")

    p = sub.add_parser("run", help="federated fine-tuning, filtering and detection")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="directory with generator.ckpt and global.ckpt")
    p.add_argument("--datasets", type=Path, help="dataset directory written by `generate`")
    p.add_argument("--aggregator", choices=["average", "robust"])
    p.add_argument("--dump-updates", action="store_true", help="write raw per-layer updates each round")
    p.add_argument("--resume", action="store_true", help="continue from the last saved round")

    p = sub.add_parser("bench-agg", help="bias / runtime benchmark of the robust filter")
    _common(p)

    p = sub.add_parser("keygen", help="write a fresh random watermark key file")
    p.add_argument("--scheme", choices=["kgw", "kth"], default="kgw")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--preset", choices=sorted(PRESETS))
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg = cfg.replace(jobs=args.jobs)
    if getattr(args, "aggregator", None):
        cfg = cfg.replace(aggregator={"kind": args.aggregator})
    if cfg.corpus.path is not None and not Path(cfg.corpus.path).is_file():
        raise ConfigError(f"corpus.path: no such file {cfg.corpus.path}")
    return cfg


def out_dir(cfg: ExperimentConfig, args) -> Path:
    from .experiment import output_dir
    return args.out if args.out else output_dir(cfg) / cfg.name


def cmd_pretrain(args) -> int:
    from .experiment import stage_pretrain
    cfg = resolve_config(args)
    out = out_dir(cfg, args)
    stage_pretrain(cfg, out)
    print(f"checkpoints written to {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .experiment import load_splits
    from .fedsim import make_spec, prepare_clients
    from .formats import save_datasets

    cfg = resolve_config(args)
    if args.key is not None:
        if not args.key.is_file():
            raise ConfigError(f"key file not found: {args.key}")
        spec = load_key(args.key)
    else:
        spec = make_spec(cfg.watermark)
    ckpt = args.checkpoint / "generator.ckpt"
    if not ckpt.is_file():
        raise ConfigError(f"generator checkpoint not found: {ckpt}")
    generator = load_checkpoint(ckpt)
    splits = load_splits(cfg)
    clients = prepare_clients(splits.pool, cfg.fl, spec, generator, cfg.corpus.prompt_length)
    out = out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    save_key(spec, out / "key.json")
    save_datasets(out / "datasets", splits.corpus.vocab, clients, {"config_hash": cfg.config_hash()})
    print(f"{len(clients)} client datasets written to {out / 'datasets'}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import stage_run, stage_sweep
    cfg = resolve_config(args)
    out = out_dir(cfg, args)
    if cfg.sweep.n_watermarking or cfg.sweep.aggregators or cfg.sweep.seeds:
        rows = stage_sweep(cfg, out, resume=args.resume)
        print(f"{len(rows)} sweep cells written to {out / 'sweep.csv'}")
        return EXIT_OK
    for p in (args.checkpoint, args.datasets):
        if p is not None and not p.is_dir():
            raise ConfigError(f"not a directory: {p}")
    art = stage_run(cfg, out, checkpoint_dir=args.checkpoint, dataset_dir=args.datasets,
                    resume=args.resume, dump_updates=args.dump_updates)
    rep = art.report
    agg = rep.detection.get("aggregated")
    msg = f"stopped at round {rep.stopping_round}"
    if agg:
        msg += f"; aggregated p = {agg['p_value']:.3g}"
    print(f"{msg}; report in {out / 'report.json'}")
    return EXIT_OK


def cmd_bench_agg(args) -> int:
    from .experiment import stage_bench
    cfg = resolve_config(args)
    out = out_dir(cfg, args)
    summary = stage_bench(cfg, out)
    print(f"beta_hat trend slope {summary['beta_trend']['slope']:.3g} per decade of d; "
          f"results in {out / 'bench.csv'}")
    return EXIT_OK


def cmd_keygen(args) -> int:
    from dataclasses import replace
    from .fedsim import make_spec
    cfg = load_config(args.config, args.preset)
    wm = replace(cfg.watermark, scheme=args.scheme, key=secrets.randbits(64))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_key(make_spec(wm), args.out)
    print(f"key written to {args.out}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "generate": cmd_generate, "run": cmd_run,
            "bench-agg": cmd_bench_agg, "keygen": cmd_keygen}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"fedprov: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"fedprov: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"fedprov: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
