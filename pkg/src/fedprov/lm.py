"""Toy character-level language model.

A fixed-context MLP over token embeddings, written directly in numpy with a
hand-derived backward pass. The same model class is used as the watermark
generator and as the federated global model.

Parameters live in one flat float64 vector. The vector is partitioned into
named *layers* (embedding, hidden_0..hidden_{n-1}, output); each layer holds
its weight matrix followed by its bias, and the robust aggregator filters each
layer independently.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PAD_ID = 0
PAD_CHAR = "\x00"

ORIGINS = ("natural", "synthetic-clean", "synthetic-watermarked")


class NumericalError(FloatingPointError):
    """Raised when training produces non-finite values."""


# ---------------------------------------------------------------------------
# vocabulary / token sequences


@dataclass(frozen=True)
class Vocab:
    """Character vocabulary. Id 0 is reserved for left padding."""

    chars: tuple[str, ...]

    def __post_init__(self):
        if len(self.chars) < 2:
            raise ValueError("vocabulary needs at least 2 symbols")
        if self.chars[0] != PAD_CHAR:
            raise ValueError("id 0 must be the pad symbol")
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate symbols in vocabulary")

    @property
    def size(self) -> int:
        return len(self.chars)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls((PAD_CHAR,) + tuple(sorted(set(text) - {PAD_CHAR})))

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.array([index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, tokens: Iterable[int]) -> str:
        return "".join(self.chars[int(t)] for t in tokens)


_KEEP = re.compile(r"[^a-z.,' ]+")
_SPACES = re.compile(r" {2,}")


def normalize_text(text: str) -> str:
    """Lowercase and reduce text to ``a-z . , '`` and single spaces."""
    text = _KEEP.sub(" ", text.lower())
    return _SPACES.sub(" ", text).strip()


@dataclass
class TokenSeq:
    """A token sequence plus provenance.

    ``prompt_len`` marks how many leading tokens were given as a prompt when
    the sequence was generated (0 for natural text).
    """

    tokens: np.ndarray
    origin: str = "natural"
    prompt_len: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be one-dimensional")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError("prompt_len out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    def check_vocab(self, vocab_size: int) -> None:
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise ValueError("token id outside vocabulary")


def split_documents(tokens: np.ndarray, doc_length: int) -> list[TokenSeq]:
    """Cut a token stream into consecutive documents of exactly ``doc_length``."""
    if doc_length < 2:
        raise ValueError("doc_length must be >= 2")
    n = len(tokens) // doc_length
    return [TokenSeq(tokens[i * doc_length:(i + 1) * doc_length].copy()) for i in range(n)]


# ---------------------------------------------------------------------------
# architecture / parameters


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int
    context_length: int = 8
    hidden: int = 64
    n_layers: int = 1
    embed_dim: int = 16

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        for name in ("context_length", "hidden", "n_layers", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 (zero-width layers are not allowed)")

    def tensor_shapes(self) -> list[tuple[str, list[tuple[str, tuple[int, ...]]]]]:
        V, C, H, E = self.vocab_size, self.context_length, self.hidden, self.embed_dim
        layers = [("embedding", [("embedding.weight", (V, E))])]
        fan_in = C * E
        for i in range(self.n_layers):
            layers.append((f"hidden_{i}", [(f"hidden_{i}.weight", (fan_in, H)),
                                           (f"hidden_{i}.bias", (H,))]))
            fan_in = H
        layers.append(("output", [("output.weight", (H, V)), ("output.bias", (V,))]))
        return layers

    @property
    def n_params(self) -> int:
        V, C, H, E, L = (self.vocab_size, self.context_length, self.hidden,
                         self.embed_dim, self.n_layers)
        return V * E + (C * E * H + H) + (L - 1) * (H * H + H) + (H * V + V)


@dataclass(frozen=True)
class Layout:
    """Where every tensor and layer sits inside the flat parameter vector."""

    layer_names: tuple[str, ...]
    layer_slices: tuple[slice, ...]
    tensor_slices: dict
    tensor_shapes: dict

    @classmethod
    def for_arch(cls, arch: ArchConfig) -> "Layout":
        names, lslices, tslices, tshapes = [], [], {}, {}
        pos = 0
        for lname, tensors in arch.tensor_shapes():
            start = pos
            for tname, shape in tensors:
                size = math.prod(shape)
                tslices[tname] = slice(pos, pos + size)
                tshapes[tname] = shape
                pos += size
            names.append(lname)
            lslices.append(slice(start, pos))
        return cls(tuple(names), tuple(lslices), tslices, tshapes)

    @property
    def dim(self) -> int:
        return self.layer_slices[-1].stop


@dataclass
class ModelParams:
    arch: ArchConfig
    vector: np.ndarray
    layout: Layout = field(init=False, repr=False)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.layout = Layout.for_arch(self.arch)
        if self.vector.shape != (self.layout.dim,):
            raise ValueError(f"expected vector of length {self.layout.dim}, got {self.vector.shape}")

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def vocab_size(self) -> int:
        return self.arch.vocab_size

    def layers(self) -> list[tuple[str, np.ndarray]]:
        return [(n, self.vector[s]) for n, s in zip(self.layout.layer_names, self.layout.layer_slices)]

    def tensor(self, name: str) -> np.ndarray:
        return self.vector[self.layout.tensor_slices[name]].reshape(self.layout.tensor_shapes[name])

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: self.tensor(n) for n in self.layout.tensor_slices}

    def replace(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, vector)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.vector.copy())


def build_model(arch: ArchConfig, seed: int = 0) -> ModelParams:
    """Randomly initialise a model. Deterministic in ``(arch, seed)``."""
    rng = np.random.default_rng(seed)
    layout = Layout.for_arch(arch)
    vec = np.zeros(layout.dim)
    for name, shape in layout.tensor_shapes.items():
        if name.endswith(".bias"):
            continue
        if name == "embedding.weight":
            scale = 1.0
        elif name == "output.weight":
            scale = 0.1 / math.sqrt(shape[0])
        else:
            scale = 1.0 / math.sqrt(shape[0])
        vec[layout.tensor_slices[name]] = scale * rng.standard_normal(math.prod(shape))
    return ModelParams(arch, vec)


def zeros_model(arch: ArchConfig) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.n_params))


# ---------------------------------------------------------------------------
# forward / backward


def context_windows(tokens: np.ndarray, positions: np.ndarray, context_length: int) -> np.ndarray:
    """Contexts for predicting ``tokens[t]`` at each ``t`` in ``positions``.

    Row ``i`` holds ``tokens[t-C:t]`` left-padded with ``PAD_ID``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    padded = np.concatenate([np.full(context_length, PAD_ID, dtype=np.int64), tokens])
    idx = np.asarray(positions)[:, None] + np.arange(context_length)[None, :]
    return padded[idx]


def training_pairs(dataset: Sequence[TokenSeq], context_length: int) -> tuple[np.ndarray, np.ndarray]:
    """All (context, next token) pairs of a dataset, positions 1..len-1."""
    ctxs, tgts = [], []
    for seq in dataset:
        if len(seq) < 2:
            continue
        pos = np.arange(1, len(seq))
        ctxs.append(context_windows(seq.tokens, pos, context_length))
        tgts.append(seq.tokens[1:])
    if not ctxs:
        return np.zeros((0, context_length), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ctxs), np.concatenate(tgts)


def _forward(model: ModelParams, ctx: np.ndarray):
    t = model.tensors()
    B = ctx.shape[0]
    h = t["embedding.weight"][ctx].reshape(B, -1)
    acts = [h]
    for i in range(model.arch.n_layers):
        h = np.tanh(h @ t[f"hidden_{i}.weight"] + t[f"hidden_{i}.bias"])
        acts.append(h)
    out = h @ t["output.weight"] + t["output.bias"]
    return out, acts


def batch_logits(model: ModelParams, ctx: np.ndarray) -> np.ndarray:
    """Logits for a batch of already-windowed contexts, shape (B, |V|)."""
    return _forward(model, np.asarray(ctx, dtype=np.int64))[0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: ModelParams, context) -> np.ndarray:
    """Next-token logits given a context (TokenSeq or sequence of ids)."""
    toks = context.tokens if isinstance(context, TokenSeq) else np.asarray(context, dtype=np.int64)
    if len(toks) == 0:
        raise ValueError("context must be nonempty")
    ctx = context_windows(toks, np.array([len(toks)]), model.arch.context_length)
    return batch_logits(model, ctx)[0]


def loss_and_grad(model: ModelParams, ctx: np.ndarray, tgt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token NLL over a batch and its gradient as a flat vector."""
    arch = model.arch
    t = model.tensors()
    B = ctx.shape[0]
    out, acts = _forward(model, ctx)
    logp = log_softmax(out)
    loss = -float(logp[np.arange(B), tgt].mean())

    grad = np.zeros(model.dim)
    layout = model.layout

    def put(name, value):
        grad[layout.tensor_slices[name]] = value.ravel()

    d = np.exp(logp)
    d[np.arange(B), tgt] -= 1.0
    d /= B
    h = acts[-1]
    put("output.weight", h.T @ d)
    put("output.bias", d.sum(axis=0))
    dh = d @ t["output.weight"].T
    for i in reversed(range(arch.n_layers)):
        h = acts[i + 1]
        dz = dh * (1.0 - h * h)
        put(f"hidden_{i}.weight", acts[i].T @ dz)
        put(f"hidden_{i}.bias", dz.sum(axis=0))
        dh = dz @ t[f"hidden_{i}.weight"].T
    g_emb = np.zeros((arch.vocab_size, arch.embed_dim))
    np.add.at(g_emb, ctx.ravel(), dh.reshape(-1, arch.embed_dim))
    put("embedding.weight", g_emb)
    return loss, grad


def cross_entropy(model: ModelParams, dataset: Sequence[TokenSeq], chunk: int = 8192) -> float:
    """Mean next-token negative log-likelihood (nats) over a dataset."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    ctx, tgt = training_pairs(dataset, model.arch.context_length)
    if len(tgt) == 0:
        raise ValueError("dataset has no next-token pairs")
    total = 0.0
    for s in range(0, len(tgt), chunk):
        lp = log_softmax(batch_logits(model, ctx[s:s + chunk]))
        total -= lp[np.arange(len(lp)), tgt[s:s + chunk]].sum()
    return float(total / len(tgt))


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodingPolicy:
    mode: str = "multinomial"
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.mode not in ("greedy", "multinomial"):
            raise ValueError(f"unknown decoding mode {self.mode!r}")
        if self.mode == "multinomial" and self.temperature == 0:
            raise ValueError("multinomial sampling requires temperature > 0")

    @classmethod
    def from_temperature(cls, temperature: float) -> "DecodingPolicy":
        if temperature == 0:
            return cls("greedy", 0.0)
        return cls("multinomial", temperature)


GREEDY = DecodingPolicy("greedy", 0.0)


def sample_rows(logit_rows: np.ndarray, policy: DecodingPolicy, rng: np.random.Generator) -> np.ndarray:
    """Sample one token per row. Greedy ties go to the lowest token id.

    Multinomial sampling inverts the CDF of ``softmax(logits / T)`` with one
    uniform draw per row, so two calls with the same rng state and the same
    distribution return the same tokens.
    """
    logit_rows = np.atleast_2d(logit_rows)
    if not np.all(np.isfinite(logit_rows)):
        raise ValueError("logits must be finite")
    if policy.mode == "greedy":
        return np.argmax(logit_rows, axis=1)
    p = softmax(logit_rows / policy.temperature)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p)) * cdf[:, -1]
    tok = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(tok, p.shape[1] - 1)


def sample_next(logit_vec, policy: DecodingPolicy, rng: np.random.Generator | None = None) -> int:
    if rng is None:
        if policy.mode != "greedy":
            raise ValueError("multinomial sampling needs an rng")
        rng = np.random.default_rng(0)
    return int(sample_rows(np.asarray(logit_vec, dtype=np.float64)[None, :], policy, rng)[0])


# chooser(step, history (B, t), logits (B, V)) -> tokens (B,)
Chooser = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def autoregress(model: ModelParams, prompts: np.ndarray, length: int, choose: Chooser) -> np.ndarray:
    """Extend a batch of equal-length prompts by ``length`` tokens."""
    if length < 1:
        raise ValueError("length must be >= 1")
    hist = np.asarray(prompts, dtype=np.int64)
    if hist.ndim != 2 or hist.shape[1] == 0:
        raise ValueError("prompts must be a nonempty (B, q) array")
    C = model.arch.context_length
    out = np.empty((hist.shape[0], hist.shape[1] + length), dtype=np.int64)
    out[:, :hist.shape[1]] = hist
    q = hist.shape[1]
    for step in range(length):
        t = q + step
        ctx = context_windows_batch(out[:, :t], C)
        z = batch_logits(model, ctx)
        out[:, t] = choose(step, out[:, :t], z)
    return out


def context_windows_batch(hist: np.ndarray, context_length: int) -> np.ndarray:
    """Last ``context_length`` tokens of every row, left-padded."""
    B, t = hist.shape
    if t >= context_length:
        return hist[:, t - context_length:]
    pad = np.full((B, context_length - t), PAD_ID, dtype=np.int64)
    return np.concatenate([pad, hist], axis=1)


def generate_batch(model, prompts: np.ndarray, length: int, policy: DecodingPolicy,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    if policy.mode == "multinomial" and rng is None:
        raise ValueError("multinomial sampling needs an rng")
    return autoregress(model, prompts, length, lambda step, hist, z: sample_rows(z, policy, rng))


def generate(model: ModelParams, prompt, length: int, policy: DecodingPolicy,
             rng: np.random.Generator | None = None, origin: str = "synthetic-clean") -> TokenSeq:
    """Continue ``prompt`` by exactly ``length`` tokens."""
    toks = prompt.tokens if isinstance(prompt, TokenSeq) else np.asarray(prompt, dtype=np.int64)
    out = generate_batch(model, toks[None, :], length, policy, rng)[0]
    return TokenSeq(out, origin=origin, prompt_len=len(toks))


# ---------------------------------------------------------------------------
# training

NSGD_EPS = 1e-12


@dataclass
class Adam:
    """Adam with bias correction; state persists across ``step`` calls."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": self.m, "v": self.v, "t": self.t}


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def epoch_steps(dataset: Sequence[TokenSeq], batch_size: int) -> int:
    n = sum(max(len(s) - 1, 0) for s in dataset)
    return max(1, math.ceil(n / batch_size))


def local_train(model: ModelParams, dataset: Sequence[TokenSeq], steps: int | None, lr: float,
                batch_size: int = 64, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run normalized SGD on a private copy and return ``theta_local - theta_global``.

    ``steps=None`` means one pass over the dataset. Every minibatch gradient is
    divided by its l2 norm (plus ``NSGD_EPS``) before the ``lr`` step, so each
    step moves the parameters by at most ``lr`` in l2.
    """
    if steps is not None and steps < 1:
        raise ValueError("steps must be >= 1")
    if lr <= 0:
        raise ValueError("client learning rate must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    ctx, tgt = training_pairs(dataset, model.arch.context_length)
    if len(tgt) == 0:
        raise ValueError("dataset has no next-token pairs")
    if steps is None:
        steps = math.ceil(len(tgt) / batch_size)
    theta0 = model.vector
    local = model.copy()
    for idx in _batches(len(tgt), batch_size, steps, rng):
        _, g = loss_and_grad(local, ctx[idx], tgt[idx])
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient in local training")
        local.vector -= lr * g / (np.linalg.norm(g) + NSGD_EPS)
    return local.vector - theta0


def pretrain(model: ModelParams, dataset: Sequence[TokenSeq], epochs: int, lr: float = 3e-3,
             batch_size: int = 128, seed: int = 0,
             eval_set: Sequence[TokenSeq] | None = None) -> tuple[ModelParams, list[dict]]:
    """Centralised Adam training; returns the trained model and a loss curve."""
    rng = np.random.default_rng(seed)
    ctx, tgt = training_pairs(dataset, model.arch.context_length)
    opt = Adam(lr)
    vec = model.vector.copy()
    curve = []
    steps = math.ceil(len(tgt) / batch_size)
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in _batches(len(tgt), batch_size, steps, rng):
            loss, g = loss_and_grad(ModelParams(model.arch, vec), ctx[idx], tgt[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise NumericalError(f"non-finite loss during pretraining (epoch {epoch})")
            vec = opt.step(vec, g)
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / len(tgt)}
        if eval_set:
            row["eval_loss"] = cross_entropy(ModelParams(model.arch, vec), eval_set)
        curve.append(row)
    return ModelParams(model.arch, vec), curve
