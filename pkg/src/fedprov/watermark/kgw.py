"""Green-list watermark: generation, text scoring and radioactivity detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from ..lm import (DecodingPolicy, ModelParams, TokenSeq, autoregress, batch_logits,
                  context_windows, sample_rows)
from .hashing import green_masks
from .result import DetectionResult

EXACT_TAIL_MAX_N = 10_000


@dataclass(frozen=True)
class KgwSpec:
    key: int
    gamma: float = 0.25
    delta: float = 3.0
    kgram: int = 2
    temperature: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.kgram < 1:
            raise ValueError("kgram must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not 0 <= self.key < 2 ** 64:
            raise ValueError("key must be a 64-bit unsigned integer")

    @property
    def policy(self) -> DecodingPolicy:
        return DecodingPolicy.from_temperature(self.temperature)


class GreenLists:
    """Memoised green masks for one (spec, vocabulary)."""

    def __init__(self, spec: KgwSpec, vocab_size: int):
        self.spec = spec
        self.vocab_size = vocab_size
        self._cache: dict[tuple, np.ndarray] = {}

    def masks(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        keys = [tuple(r) for r in contexts.tolist()]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            fresh = green_masks(self.spec.key, contexts[missing], self.vocab_size, self.spec.gamma)
            for i, m in zip(missing, fresh):
                self._cache[keys[i]] = m
        return np.stack([self._cache[k] for k in keys]) if keys else np.zeros((0, self.vocab_size), bool)

    def is_green(self, context: tuple, token: int) -> bool:
        if context not in self._cache:
            self.masks(np.array([context]))
        return bool(self._cache[context][token])


def effective_gamma(spec: KgwSpec, vocab_size: int) -> float:
    """Realised green fraction ``floor(gamma |V|) / |V|``; the null rate used by detection."""
    return int(np.floor(spec.gamma * vocab_size)) / vocab_size


def green_list(spec: KgwSpec, context, vocab_size: int) -> np.ndarray:
    """Green mask over the vocabulary for the last ``k`` tokens ``context``."""
    context = np.asarray(context, dtype=np.int64)
    if context.shape != (spec.kgram,):
        raise ValueError(f"context must hold exactly k={spec.kgram} token ids")
    return green_masks(spec.key, context[None, :], vocab_size, spec.gamma)[0]


def kgw_generate_batch(model: ModelParams, prompts: np.ndarray, length: int, spec: KgwSpec,
                       rng: np.random.Generator | None) -> np.ndarray:
    k = spec.kgram
    policy = spec.policy
    lists = GreenLists(spec, model.vocab_size)
    if prompts.shape[1] < k:
        raise ValueError("prompt shorter than the k-gram window")

    def choose(step, hist, z):
        if spec.delta:
            z = z + spec.delta * lists.masks(hist[:, -k:])
        return sample_rows(z, policy, rng)

    return autoregress(model, prompts, length, choose)


def kgw_generate(model: ModelParams, prompt, length: int, spec: KgwSpec,
                 rng: np.random.Generator | None = None) -> TokenSeq:
    """Watermarked continuation: add ``delta`` to green logits, then sample at ``T``."""
    toks = prompt.tokens if isinstance(prompt, TokenSeq) else np.asarray(prompt, dtype=np.int64)
    out = kgw_generate_batch(model, toks[None, :], length, spec, rng)[0]
    return TokenSeq(out, origin="synthetic-watermarked", prompt_len=len(toks))


def _score(contexts: np.ndarray, tokens: np.ndarray, lists: GreenLists, seen: set) -> tuple[int, int]:
    S = N = 0
    if len(tokens) == 0:
        return 0, 0
    masks = lists.masks(contexts)
    for ctx, tok, mask in zip(map(tuple, contexts.tolist()), tokens.tolist(), masks):
        key = (ctx, tok)
        if key in seen:
            continue
        seen.add(key)
        N += 1
        S += bool(mask[tok])
    return S, N


def kgw_score_text(text: TokenSeq, spec: KgwSpec, vocab_size: int, start: int = 0,
                   seen: set | None = None) -> tuple[int, int]:
    """Green count ``S`` and scored count ``N`` over positions ``max(k, start)..``.

    A position is scored only if its (k-gram, token) pair has not been seen
    before in this detection call; pass the same ``seen`` set to share the
    deduplication across documents.
    """
    seen = set() if seen is None else seen
    toks = text.tokens if isinstance(text, TokenSeq) else np.asarray(text, dtype=np.int64)
    k = spec.kgram
    pos = np.arange(max(k, start), len(toks))
    if len(pos) == 0:
        return 0, 0
    ctxs = toks[pos[:, None] - np.arange(k, 0, -1)[None, :]]
    return _score(ctxs, toks[pos], GreenLists(spec, vocab_size), seen)


def binomial_tail_z(S: int, N: int, gamma: float) -> float:
    return (S - gamma * N) / math.sqrt(N * gamma * (1 - gamma))


def kgw_pvalue(S: int, N: int, gamma: float) -> tuple[float, float]:
    """One-sided ``(z, p)`` for ``S`` green hits out of ``N`` under Binomial(N, gamma).

    ``p = P[Binomial(N, gamma) >= S]`` exactly for ``N <= 10_000``; the normal
    approximation of ``z`` beyond that. ``N = 0`` gives ``(0.0, 1.0)``.
    """
    if N == 0:
        return 0.0, 1.0
    if not 0 <= S <= N:
        raise ValueError("need 0 <= S <= N")
    z = binomial_tail_z(S, N, gamma)
    if N <= EXACT_TAIL_MAX_N:
        p = float(stats.binom.sf(S - 1, N, gamma))
    else:
        p = float(stats.norm.sf(z))
    return z, min(max(p, 0.0), 1.0)


def greedy_predictions(model: ModelParams, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Suspect model's argmax next token given the true prefix at each position."""
    ctx = context_windows(tokens, positions, model.arch.context_length)
    return np.argmax(batch_logits(model, ctx), axis=1)


def kgw_radioactivity_detect(suspect: ModelParams, dataset: Sequence[TokenSeq], spec: KgwSpec,
                             alpha: float = 0.01) -> DetectionResult:
    """Score the suspect model's greedy predictions on watermarked documents.

    For every position past the prompt (and past the first ``k`` tokens) the
    suspect predicts the next token from the true prefix; the prediction is
    checked against the green list of the document's own k-gram. Counts are
    accumulated over documents in order with one shared dedup set.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    k = spec.kgram
    lists = GreenLists(spec, suspect.vocab_size)
    seen: set = set()
    S = N = 0
    per_doc = []
    for doc in dataset:
        pos = np.arange(max(k, doc.prompt_len), len(doc))
        if len(pos) == 0:
            per_doc.append({"score": 0, "count": 0})
            continue
        preds = greedy_predictions(suspect, doc.tokens, pos)
        ctxs = doc.tokens[pos[:, None] - np.arange(k, 0, -1)[None, :]]
        s, n = _score(ctxs, preds, lists, seen)
        per_doc.append({"score": s, "count": n})
        S += s
        N += n
    z, p = kgw_pvalue(S, N, effective_gamma(spec, suspect.vocab_size))
    return DetectionResult("kgw", S, N, p, alpha, z, per_doc)


def kgw_text_detect(dataset: Sequence[TokenSeq], spec: KgwSpec, vocab_size: int,
                    alpha: float = 0.01) -> DetectionResult:
    """Plain text detection over the generated part of each document."""
    seen: set = set()
    S = N = 0
    per_doc = []
    for doc in dataset:
        s, n = kgw_score_text(doc, spec, vocab_size, start=doc.prompt_len, seen=seen)
        per_doc.append({"score": s, "count": n})
        S += s
        N += n
    z, p = kgw_pvalue(S, N, effective_gamma(spec, vocab_size))
    return DetectionResult("kgw", S, N, p, alpha, z, per_doc)
