"""Radioactivity against the watermark ratio: W in {2, 5, 9} of N=30 clients over
several seeds. ``--preset table3-desk`` runs the same grid under the robust filter.

    python3 scripts/eps_sweep.py [--preset eps-sweep-desk] [--seeds 0 1 2] [--out runs/eps-sweep]
"""

import argparse
from pathlib import Path

from fedprov.config import preset
from fedprov.experiment import stage_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--preset", default="eps-sweep-desk", choices=["eps-sweep-desk", "table3-desk"])
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--out", type=Path)
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()

    cfg = preset(args.preset)
    if args.seeds:
        cfg = cfg.replace(sweep={"seeds": args.seeds})
    out = args.out or Path("runs") / args.preset
    rows = stage_sweep(cfg, out, resume=args.resume)
    print(f"{'agg':<9}{'W':>3}{'eps':>7}{'seed':>6}{'stop':>6}{'ER':>7}{'p post':>11}")
    for r in rows:
        print(f"{r['aggregator']:<9}{r['n_watermarking']:>3}{r['eps']:>7.3f}{r['seed']:>6}"
              f"{r['stopping_round']:>6}{r['er']:>7.2f}{r['p_post']:>11.2e}")
    for seed in sorted({r["seed"] for r in rows}):
        ps = [r["p_post"] for r in sorted(rows, key=lambda r: r["n_watermarking"]) if r["seed"] == seed]
        trend = "non-increasing" if all(b <= a for a, b in zip(ps, ps[1:])) else "not monotone"
        print(f"seed {seed}: post p {trend} in eps")
    print(f"table written to {out / 'sweep.csv'}")


if __name__ == "__main__":
    main()
