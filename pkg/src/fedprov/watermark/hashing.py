"""Keyed 64-bit hashing for green lists.

The green list for a k-gram context is defined without any library PRNG so
that other implementations can reproduce it bit-for-bit:

    h = mix64(key)
    for tok in context:            # oldest token first
        h = mix64(h ^ (tok + 1) * GOLDEN)
    score[v] = mix64(h + (v + 1) * GOLDEN)    for every token id v
    green    = the floor(gamma * |V|) ids with the smallest score
               (ties broken by lower token id)

``mix64`` is the SplitMix64 finalizer and all arithmetic is modulo 2**64.
The per-token score is a counter-based stream keyed by ``h``.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def context_hash(key: int, contexts: np.ndarray) -> np.ndarray:
    """Hash of ``(key, k-gram)`` for each row of ``contexts`` (shape (M, k))."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    h = mix64(np.full(contexts.shape[0], key & MASK, dtype=np.uint64))
    with np.errstate(over="ignore"):
        for j in range(contexts.shape[1]):
            salt = (contexts[:, j].astype(np.uint64) + np.uint64(1)) * np.uint64(GOLDEN)
            h = mix64(h ^ salt)
    return h


def token_scores(hashes: np.ndarray, vocab_size: int) -> np.ndarray:
    """Counter-based pseudo-random score per (context, token), shape (M, |V|)."""
    hashes = np.asarray(hashes, dtype=np.uint64)
    with np.errstate(over="ignore"):
        ctr = (np.arange(1, vocab_size + 1, dtype=np.uint64) * np.uint64(GOLDEN))[None, :]
        return mix64(hashes[:, None] + ctr)


def green_masks(key: int, contexts: np.ndarray, vocab_size: int, gamma: float) -> np.ndarray:
    """Boolean green masks, one row per context."""
    n_green = int(np.floor(gamma * vocab_size))
    scores = token_scores(context_hash(key, contexts), vocab_size)
    order = np.argsort(scores, axis=1, kind="stable")
    masks = np.zeros(scores.shape, dtype=bool)
    rows = np.arange(scores.shape[0])[:, None]
    masks[rows, order[:, :n_green]] = True
    return masks
