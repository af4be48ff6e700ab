"""Server-side aggregation of client updates.

``average`` is plain FedAvg-style averaging. ``robust_filter`` is an
iterative spectral filter: per layer, estimate the top eigenvalue of the
update covariance with power iteration (matrix-vector products only, never a
d x d matrix) and drop the client with the largest projection on the top
direction, until either the eigenvalue falls under a supplied bound, the
eigenvalue stops moving, or ``2 * ceil(eps * N)`` clients are gone.

Aggregators only ever see an ``(N, d)`` array and the layer slices; client
labels stay with the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "average"
    eps: float = 0.3
    eigen_iters: int = 100
    eigen_tol: float = 1e-10
    convergence_tol: float = 1e-3
    chunk_factor: int = 1
    gamma_multiplier: float = math.sqrt(20)
    removals_per_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("average", "robust"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}")
        if not 0.0 <= self.eps < 0.5:
            raise ValueError("eps must lie in [0, 0.5)")
        if self.eigen_iters < 1 or self.chunk_factor < 1 or self.removals_per_step < 1:
            raise ValueError("eigen_iters, chunk_factor and removals_per_step must be >= 1")
        if self.convergence_tol <= 0 or self.eigen_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FilterOutcome:
    mean: np.ndarray
    filtered: list[frozenset]
    iterations: list[int]
    eigenvalues: list[float]
    layer_names: list[str] = field(default_factory=list)


def removal_cap(eps: float, n: int) -> int:
    return 2 * math.ceil(eps * n)


def average(updates: np.ndarray) -> np.ndarray:
    updates = np.asarray(updates, dtype=np.float64)
    if updates.ndim != 2 or updates.shape[0] == 0:
        raise ValueError("need a nonempty (N, d) update matrix")
    return updates.mean(axis=0)


def dominant_eigen(updates: np.ndarray, iters: int = 100, tol: float = 1e-10,
                   rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Top eigenpair of the (1/N-normalised) covariance of the rows of ``updates``.

    Rows are centred first. Each iteration costs two products with the
    ``(N, d)`` matrix. Returns the Rayleigh quotient and a unit vector; a
    set with zero spread returns ``(0.0, start_vector)``.
    """
    X = np.asarray(updates, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two update vectors")
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = Xc.T @ (Xc @ v) / n
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v_new = w / norm
        proj = Xc @ v_new
        lam_new = float(proj @ proj / n)
        done = abs(lam_new - lam) <= tol * max(lam_new, 1e-300)
        v, lam = v_new, lam_new
        if done:
            break
    return lam, v


def dense_eigen(updates: np.ndarray, iters: int = 0, tol: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Exact top eigenpair from the explicit d x d covariance. Reference only."""
    X = np.asarray(updates, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    w, V = np.linalg.eigh(Xc.T @ Xc / X.shape[0])
    return max(float(w[-1]), 0.0), V[:, -1]


def outlier_removal_step(updates: np.ndarray, v: np.ndarray, count: int = 1) -> np.ndarray:
    """Row indices (into ``updates``) of the ``count`` largest |projections|.

    Projections are ``<x_i - mean, v>``; ties go to the lower row index.
    """
    X = np.asarray(updates, dtype=np.float64)
    proj = np.abs((X - X.mean(axis=0)) @ v)
    order = np.argsort(-proj, kind="stable")
    return order[:count]


def chunk_slices(length: int, chunk_factor: int) -> list[slice]:
    """Contiguous, equal-as-possible partition; earlier chunks take the remainder."""
    if chunk_factor < 1:
        raise ValueError("chunk_factor must be >= 1")
    k = min(chunk_factor, max(length, 1))
    base, extra = divmod(length, k)
    out, pos = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(slice(pos, pos + size))
        pos += size
    return out


def chunk_layer(vector: np.ndarray, chunk_factor: int) -> list[np.ndarray]:
    return [vector[s] for s in chunk_slices(len(vector), chunk_factor)]


def filter_block(X: np.ndarray, config: AggregatorConfig, rng: np.random.Generator,
                 clean_var_bound: float | None = None, budget: int | None = None,
                 already: frozenset = frozenset(), eigen=dominant_eigen) -> tuple[np.ndarray, int, float]:
    """Run the filtering loop on one block of columns.

    ``budget`` caps how many clients outside ``already`` may be removed
    (default ``2 * ceil(eps * N)``); removing a client in ``already`` is free,
    which keeps the per-layer union within the cap when a layer is chunked.
    ``eigen`` swaps in another top-eigenpair routine (same signature as
    :func:`dominant_eigen`), e.g. a dense reference.
    Returns (survivor mask, iterations run, last eigenvalue estimate).
    """
    n = X.shape[0]
    alive = np.ones(n, dtype=bool)
    budget = removal_cap(config.eps, n) if budget is None else budget
    gamma = None if clean_var_bound is None else config.gamma_multiplier * clean_var_bound
    lam_prev = None
    lam = 0.0
    it = 0
    spent = 0
    while spent < budget:
        ids = np.flatnonzero(alive)
        if len(ids) < 2:
            break
        lam, v = eigen(X[ids], config.eigen_iters, config.eigen_tol, rng)
        it += 1
        if gamma is not None and lam <= gamma:
            break
        if lam_prev is not None and abs(lam_prev - lam) < config.convergence_tol * lam_prev:
            break
        if lam == 0.0:
            break
        k = min(config.removals_per_step, len(ids) - 1)
        order = outlier_removal_step(X[ids], v, len(ids))
        for i in ids[order]:
            if k == 0 or spent >= budget:
                break
            alive[i] = False
            k -= 1
            spent += int(i) not in already
        lam_prev = lam
    return alive, it, lam


def robust_filter(updates: np.ndarray, layer_slices: Sequence[slice], config: AggregatorConfig,
                  clean_var_bound: float | None = None, round_index: int = 0,
                  layer_names: Sequence[str] | None = None, eigen=dominant_eigen) -> FilterOutcome:
    """Filter each layer (and each chunk of it) independently and average survivors.

    A client dropped in any chunk of a layer counts as filtered for that
    layer. Chunks run in order and share the layer's removal budget, so the
    per-layer filtered set never exceeds ``2 * ceil(eps * N)``. With fewer
    than three clients nothing is filtered.
    """
    U = np.asarray(updates, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] == 0:
        raise ValueError("need a nonempty (N, d) update matrix")
    n = U.shape[0]
    cap = removal_cap(config.eps, n)
    mean = np.empty(U.shape[1])
    filtered, iters, lams = [], [], []
    for li, ls in enumerate(layer_slices):
        if ls.stop - ls.start < 1:
            raise ValueError("degenerate layer with no coordinates")
        removed: set[int] = set()
        it_total, lam_max = 0, 0.0
        for ci, cs in enumerate(chunk_slices(ls.stop - ls.start, config.chunk_factor)):
            cols = slice(ls.start + cs.start, ls.start + cs.stop)
            block = U[:, cols]
            if n < 3:
                mean[cols] = block.mean(axis=0)
                continue
            rng = np.random.default_rng([config.seed, round_index, li, ci])
            alive, it, lam = filter_block(block, config, rng, clean_var_bound,
                                          cap - len(removed), frozenset(removed), eigen)
            mean[cols] = block[alive].mean(axis=0)
            removed.update(int(i) for i in np.flatnonzero(~alive))
            it_total += it
            lam_max = max(lam_max, lam)
        filtered.append(frozenset(removed))
        iters.append(it_total)
        lams.append(lam_max)
    names = list(layer_names) if layer_names is not None else [f"layer_{i}" for i in range(len(layer_slices))]
    return FilterOutcome(mean, filtered, iters, lams, names)


def aggregate(updates: np.ndarray, layer_slices: Sequence[slice], config: AggregatorConfig,
              round_index: int = 0, layer_names: Sequence[str] | None = None,
              clean_var_bound: float | None = None) -> FilterOutcome:
    """Dispatch on ``config.kind``. Averaging reports empty filtered sets."""
    if config.kind == "average":
        names = list(layer_names) if layer_names is not None else [f"layer_{i}" for i in range(len(layer_slices))]
        return FilterOutcome(average(updates), [frozenset() for _ in layer_slices],
                             [0] * len(layer_slices), [0.0] * len(layer_slices), names)
    return robust_filter(updates, layer_slices, config, clean_var_bound, round_index, layer_names)


def bias(filter_mean: np.ndarray, clean_mean: np.ndarray, clean_cov_norm: float) -> tuple[float, float]:
    """l2 distance to the clean mean and its ratio to sqrt(||Sigma_C||_2)."""
    b = float(np.linalg.norm(np.asarray(filter_mean) - np.asarray(clean_mean)))
    if clean_cov_norm <= 0.0:
        return b, (0.0 if b == 0.0 else math.inf)
    return b, b / math.sqrt(clean_cov_norm)
