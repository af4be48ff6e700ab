"""Bias and runtime of the robust filter on eps-corrupted Gaussian sets, with and
without the clean-variance bound, over a range of outlier shifts.

    python3 scripts/bench_agg.py [--dims 100 1000 10000] [--trials 50] [--scales 3 10]
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedprov.bench import bench_csv, beta_trend, run_bench, time_scaling
from fedprov.config import BenchConfig
from fedprov.robust_agg import AggregatorConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[100, 1000, 10000])
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--scales", type=float, nargs="+", default=[3.0, 10.0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench-agg"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    summary = []
    for scale in args.scales:
        for use_bound in (True, False):
            bench = BenchConfig(dims=args.dims, trials=args.trials, outlier_scale=scale, use_bound=use_bound)
            rows = run_bench(bench, AggregatorConfig(kind="robust", eps=bench.eps), use_bound)
            tag = f"scale{scale:g}_{'bound' if use_bound else 'heuristic'}"
            (args.out / f"{tag}.csv").write_text(bench_csv(rows))
            trend = beta_trend(rows)
            med = {d: float(np.median([r.beta_hat for r in rows if r.d == d])) for d in args.dims}
            steps = [round(s["per_doubling"], 2) for s in time_scaling(rows)]
            summary.append({"tag": tag, "median_beta": med, "trend": trend, "time_per_doubling": steps})
            print(f"{tag:<24} median beta " + " ".join(f"{med[d]:.3f}" for d in args.dims)
                  + f"  slope {trend['slope']:+.2e} +- {trend['stderr']:.1e}  time/doubling {steps}")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
