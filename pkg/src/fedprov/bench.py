"""Synthetic benchmark for the robust filter: eps-corrupted Gaussian update sets.

Clean rows are standard normal in ``d`` dimensions. The ``round(eps * N)``
corrupted rows form a tight cluster shifted from the clean sample mean along
a random direction. Both the shift (``outlier_scale``) and the cluster radius
(``0.1``) are measured in units of ``sqrt(lambda_C)``, the square root of the
clean sample's covariance spectral norm, so the geometry is the same at every
``d``. With ``use_bound`` the filter gets ``lambda_C`` as its variance bound.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .config import BenchConfig
from .robust_agg import AggregatorConfig, bias, dominant_eigen, robust_filter


@dataclass
class BenchRow:
    d: int
    trial: int
    bias: float
    beta_hat: float
    n_filtered: int
    outliers_caught: int
    n_outliers: int
    wall_time: float


def clean_spectral_norm(X: np.ndarray) -> float:
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    return float(s[0] ** 2 / len(X))


def corrupted_gaussian(rng: np.random.Generator, n: int, d: int, eps: float,
                       outlier_scale: float = 3.0, cluster_radius: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """``(X, is_outlier)`` with ``round(eps * n)`` planted rows in random positions."""
    n_bad = int(round(eps * n))
    bad = rng.choice(n, n_bad, replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[bad] = True
    X = rng.standard_normal((n, d))
    clean = X[~mask]
    scale = math.sqrt(clean_spectral_norm(clean))
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    jitter = rng.standard_normal((n_bad, d)) / math.sqrt(d)
    X[bad] = clean.mean(axis=0) + scale * (outlier_scale * u + cluster_radius * jitter)
    return X, mask


def bench_trial(X: np.ndarray, is_outlier: np.ndarray, config: AggregatorConfig,
                use_bound: bool = True, eigen=dominant_eigen) -> tuple[float, float, frozenset, float]:
    """Filter one set; returns ``(bias, beta_hat, filtered ids, seconds)``."""
    clean = X[~is_outlier]
    lam_c = clean_spectral_norm(clean)
    t0 = time.perf_counter()
    out = robust_filter(X, [slice(0, X.shape[1])], config, lam_c if use_bound else None, eigen=eigen)
    dt = time.perf_counter() - t0
    b, beta = bias(out.mean, clean.mean(axis=0), lam_c)
    return b, beta, out.filtered[0], dt


def run_bench(bench: BenchConfig, config: AggregatorConfig | None = None,
              use_bound: bool = True) -> list[BenchRow]:
    """``bench.trials`` corrupted sets per dimension; one row per trial."""
    config = config or AggregatorConfig(kind="robust", eps=bench.eps)
    rows = []
    for d in bench.dims:
        for t in range(bench.trials):
            rng = np.random.default_rng([bench.seed, d, t])
            X, mask = corrupted_gaussian(rng, bench.n_clients, d, bench.eps, bench.outlier_scale)
            b, beta, filt, dt = bench_trial(X, mask, config, use_bound)
            caught = len(set(np.flatnonzero(mask)) & filt)
            rows.append(BenchRow(d, t, b, beta, len(filt), caught, int(mask.sum()), dt))
    return rows


def beta_trend(rows: list[BenchRow]) -> dict:
    """Least-squares slope of beta_hat against log10(d), with its standard error."""
    x = np.log10([r.d for r in rows])
    y = np.array([r.beta_hat for r in rows])
    fit = stats.linregress(x, y)
    return {"slope": float(fit.slope), "stderr": float(fit.stderr), "intercept": float(fit.intercept)}


def time_scaling(rows: list[BenchRow]) -> list[dict]:
    """Median wall time per d and the implied factor per doubling between neighbours."""
    dims = sorted({r.d for r in rows})
    med = {d: float(np.median([r.wall_time for r in rows if r.d == d])) for d in dims}
    out = []
    for a, b in zip(dims, dims[1:]):
        ratio = med[b] / med[a]
        out.append({"d_from": a, "d_to": b, "ratio": ratio,
                    "per_doubling": ratio ** (1.0 / math.log2(b / a))})
    return out


BENCH_COLUMNS = ("d", "trial", "bias", "beta_hat", "n_filtered", "outliers_caught", "n_outliers", "wall_time")


def bench_csv(rows: list[BenchRow]) -> str:
    lines = [",".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(getattr(r, c)) if isinstance(getattr(r, c), float) else str(getattr(r, c))
                              for c in BENCH_COLUMNS))
    return "\n".join(lines) + "\n"
