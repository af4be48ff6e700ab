"""Run the three desk presets (VanillaFL with KGW, VanillaFL with KTH, ActiveFL with KGW)
on one set of pretrained models and print a summary table.

    python3 scripts/run_desk.py [--out runs/desk-suite] [--seed 0]
"""

import argparse
import time
from pathlib import Path

from fedprov.config import preset
from fedprov.experiment import load_splits, stage_pretrain, stage_run

PRESETS = ("desk", "desk-kth", "desk-active")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk-suite"))
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--presets", nargs="+", default=list(PRESETS))
    args = ap.parse_args()

    base = preset("desk")
    splits = load_splits(base)
    models = stage_pretrain(base, args.out / "models", splits)
    print(f"{'preset':<14}{'stop':>6}{'ER':>7}{'OFR':>7}{'p pre':>10}{'p post':>10}{'val':>8}{'sec':>7}")
    for name in args.presets:
        cfg = preset(name)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        t0 = time.perf_counter()
        rep = stage_run(cfg, args.out / name, splits=splits, models=models).report
        pre = rep.pre_detection["aggregated"]["p_value"]
        post = rep.detection["aggregated"]["p_value"]
        er = rep.headline["er"]
        print(f"{name:<14}{rep.stopping_round:>6}{er:>7.2f}{rep.headline['ofr']:>7.2f}"
              f"{pre:>10.2e}{post:>10.2e}{rep.utility['validation']:>8.3f}{time.perf_counter() - t0:>7.0f}")


if __name__ == "__main__":
    main()
