"""Distortion-free key-sequence watermark with inverse-transform sampling.

The key is a sequence of ``n`` pairs ``(u_i, pi_i)``: a uniform draw and a
random permutation of the vocabulary. ``pi[i, token]`` is the token's rank in
the permuted order. Generation at key index ``i`` walks the vocabulary in
rank order and emits the first token whose cumulative probability exceeds
``u_i``; detection measures how well a text lines up with the key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..lm import ModelParams, TokenSeq, autoregress, generate_batch, GREEDY, softmax
from .result import DetectionResult


@dataclass(frozen=True)
class KthSpec:
    key: int
    key_length: int = 256
    n_resamples: int = 99
    edit_penalty: float = math.inf
    shift_slicing: bool = True
    block_search: bool = True

    def __post_init__(self):
        if self.key_length < 1:
            raise ValueError("key_length must be >= 1")
        if self.n_resamples < 1:
            raise ValueError("n_resamples must be >= 1")
        if self.edit_penalty < 0:
            raise ValueError("edit_penalty must be nonnegative")


@dataclass(frozen=True)
class KthKey:
    u: np.ndarray        # (n,)
    pi: np.ndarray       # (n, V) rank of each token
    order: np.ndarray    # (n, V) token at each rank

    def __post_init__(self):
        V = self.pi.shape[1]
        if not np.array_equal(np.sort(self.pi, axis=1), np.broadcast_to(np.arange(V), self.pi.shape)):
            raise ValueError("each pi row must be a permutation of the vocabulary")

    @property
    def length(self) -> int:
        return len(self.u)

    @property
    def vocab_size(self) -> int:
        return self.pi.shape[1]

    @classmethod
    def from_pi(cls, u, pi) -> "KthKey":
        u = np.asarray(u, dtype=np.float64)
        pi = np.atleast_2d(np.asarray(pi, dtype=np.int64))
        return cls(u, pi, np.argsort(pi, axis=1))


def random_key(rng: np.random.Generator, length: int, vocab_size: int) -> KthKey:
    u = rng.random(length)
    order = np.argsort(rng.random((length, vocab_size)), axis=1)
    return KthKey(u, np.argsort(order, axis=1), order)


def key_sequence(spec: KthSpec, vocab_size: int) -> KthKey:
    """The secret key sequence, derived deterministically from ``spec.key``."""
    return random_key(np.random.default_rng([spec.key, 0x4B5448]), spec.key_length, vocab_size)


def its_select(probs: np.ndarray, u: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Inverse-transform sampling in permuted order; one token per row."""
    probs = np.atleast_2d(probs)
    ranked = np.take_along_axis(probs, order, axis=1)
    cdf = np.cumsum(ranked, axis=1)
    r = (cdf <= np.asarray(u)[:, None] * cdf[:, -1:]).sum(axis=1)
    r = np.minimum(r, probs.shape[1] - 1)
    return order[np.arange(len(r)), r]


def kth_generate_batch(model: ModelParams, prompts: np.ndarray, length: int, key: KthKey,
                       offsets=None, shift_slicing: bool = True) -> np.ndarray:
    B = prompts.shape[0]
    offsets = np.zeros(B, dtype=np.int64) if offsets is None else np.asarray(offsets, dtype=np.int64)
    if not shift_slicing and np.any(offsets + length > key.length):
        raise ValueError("key sequence exhausted; enable shift slicing or use a longer key")

    def choose(step, hist, z):
        idx = (offsets + step) % key.length
        return its_select(softmax(z), key.u[idx], key.order[idx])

    return autoregress(model, prompts, length, choose)


def kth_generate_its(model: ModelParams, prompt, length: int, spec: KthSpec,
                     key: KthKey | None = None, offset: int = 0) -> TokenSeq:
    key = key_sequence(spec, model.vocab_size) if key is None else key
    toks = prompt.tokens if isinstance(prompt, TokenSeq) else np.asarray(prompt, dtype=np.int64)
    out = kth_generate_batch(model, toks[None, :], length, key, [offset], spec.shift_slicing)[0]
    return TokenSeq(out, origin="synthetic-watermarked", prompt_len=len(toks))


def _eta(ranks: np.ndarray, vocab_size: int) -> np.ndarray:
    return ranks / (vocab_size - 1)


def cost_matrix(y: np.ndarray, u: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``c[i, j] = |u_j - eta(pi_j(y_i))|`` for text index i and key index j."""
    V = pi.shape[1]
    return np.abs(u[None, :] - _eta(pi[:, y].T, V))


def levenshtein_cost(c: np.ndarray, penalty: float) -> float:
    """Minimum alignment cost with per-insertion/deletion ``penalty``."""
    m, n = c.shape
    prev = penalty * np.arange(n + 1, dtype=np.float64)
    for i in range(1, m + 1):
        cur = np.empty(n + 1)
        cur[0] = i * penalty
        for j in range(1, n + 1):
            cur[j] = min(prev[j - 1] + c[i - 1, j - 1], prev[j] + penalty, cur[j - 1] + penalty)
        prev = cur
    return float(prev[n])


def kth_alignment_cost(y, u, pi, edit_penalty: float = math.inf) -> float:
    """Alignment cost between a text and a key slice.

    With an infinite ``edit_penalty`` this is the positional cost
    ``sum_i |u_i - eta(pi_i(y_i))|`` (lengths must match); otherwise the
    minimum over insert/delete alignments, each indel costing ``edit_penalty``.
    """
    y = np.asarray(y, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    pi = np.atleast_2d(np.asarray(pi, dtype=np.int64))
    if pi.shape[1] < 2:
        raise ValueError("alignment cost needs |V| >= 2")
    c = cost_matrix(y, u, pi)
    if math.isinf(edit_penalty):
        if len(y) != len(u):
            raise ValueError("positional cost needs equal lengths")
        return float(np.trace(c)) if len(y) else 0.0
    return levenshtein_cost(c, edit_penalty)


def block_costs(y: np.ndarray, key: KthKey, shifts: np.ndarray) -> np.ndarray:
    """Positional cost of ``y`` against the circular key block at each shift."""
    idx = (shifts[:, None] + np.arange(len(y))[None, :]) % key.length
    ranks = key.pi[idx, y[None, :]]
    return np.abs(key.u[idx] - _eta(ranks, key.vocab_size)).sum(axis=1)


def alignment_statistic(y: np.ndarray, key: KthKey, block_search: bool = True,
                        edit_penalty: float = math.inf) -> float:
    """``phi(y, key)``: minimum alignment cost over contiguous key blocks."""
    shifts = np.arange(key.length) if block_search else np.array([0])
    if math.isinf(edit_penalty):
        if not block_search and len(y) > key.length:
            raise ValueError("text longer than key without block search")
        return float(block_costs(y, key, shifts).min())
    best = math.inf
    for s in shifts:
        idx = (s + np.arange(len(y))) % key.length
        best = min(best, levenshtein_cost(cost_matrix(y, key.u[idx], key.pi[idx]), edit_penalty))
    return best


def kth_permutation_test(y, key: KthKey, n_resamples: int, block_search: bool = True,
                         rng: np.random.Generator | None = None, edit_penalty: float = math.inf,
                         alpha: float = 0.01) -> DetectionResult:
    """Permutation-test p-value ``(1 + #{phi_t <= phi_obs}) / (T + 1)``.

    Resampled keys are drawn i.i.d. with the same length and vocabulary as
    the secret key, so the p-value lies on the grid ``{1/(T+1), ..., 1}``.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    y = y.tokens if isinstance(y, TokenSeq) else np.asarray(y, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(0)
    observed = alignment_statistic(y, key, block_search, edit_penalty)
    hits = 0
    for _ in range(n_resamples):
        alt = random_key(rng, key.length, key.vocab_size)
        hits += alignment_statistic(y, alt, block_search, edit_penalty) <= observed
    p = (1 + hits) / (n_resamples + 1)
    return DetectionResult("kth", observed, len(y), p, alpha)


def kth_text_detect(dataset: Sequence[TokenSeq], spec: KthSpec, vocab_size: int,
                    alpha: float = 0.01) -> DetectionResult:
    """Per-document permutation tests on stored text, Bonferroni-combined."""
    key = key_sequence(spec, vocab_size)
    texts = [doc.tokens[doc.prompt_len:] for doc in dataset]
    return _combine(texts, key, spec, alpha)


def kth_radioactivity_detect(suspect: ModelParams, dataset: Sequence[TokenSeq], spec: KthSpec,
                             alpha: float = 0.01) -> DetectionResult:
    """Regenerate each document greedily from its prompt with the suspect model
    and test the regeneration against the key.

    Each document gets its own p-value; they are not pooled. The reported
    p-value is the Bonferroni-corrected minimum, ``min(1, m * min_i p_i)``.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    key = key_sequence(spec, suspect.vocab_size)
    texts = []
    for doc in dataset:
        n_new = len(doc) - doc.prompt_len
        if doc.prompt_len == 0 or n_new <= 1:
            texts.append(np.zeros(0, dtype=np.int64))
            continue
        prompt = doc.tokens[None, :doc.prompt_len]
        texts.append(generate_batch(suspect, prompt, n_new, GREEDY)[0, doc.prompt_len:])
    return _combine(texts, key, spec, alpha)


def _combine(texts, key: KthKey, spec: KthSpec, alpha: float) -> DetectionResult:
    pvals, per_doc = [], []
    best_cost = math.inf
    count = 0
    for i, y in enumerate(texts):
        if len(y) <= 1:
            per_doc.append({"p_value": 1.0, "cost": None, "count": int(len(y))})
            pvals.append(1.0)
            continue
        rng = np.random.default_rng([spec.key, 0x5045524D, i])
        r = kth_permutation_test(y, key, spec.n_resamples, spec.block_search, rng,
                                 spec.edit_penalty, alpha)
        per_doc.append({"p_value": r.p_value, "cost": r.score, "count": r.count})
        pvals.append(r.p_value)
        best_cost = min(best_cost, r.score)
        count += r.count
    p = min(1.0, len(pvals) * min(pvals)) if pvals else 1.0
    score = best_cost if math.isfinite(best_cost) else 0.0
    return DetectionResult("kth", score, count, p, alpha, None, per_doc)
