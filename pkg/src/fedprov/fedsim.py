"""Federated fine-tuning with watermarking clients.

One round: broadcast the global parameters, let every client run normalized
SGD on its own shard, aggregate the deltas (plain mean or robust filter),
then take a server Adam step on the negated aggregate. The aggregation call
receives only the ``(N, d)`` update matrix and the layer slices; which
clients watermark is known only to the evaluation code that runs afterwards.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import FLConfig, WatermarkConfig
from .lm import (Adam, DecodingPolicy, ModelParams, NumericalError, TokenSeq, cross_entropy,
                 generate_batch, local_train)
from .metrics import (empty_filter_layers, evasion_rate, overfiltering_rate, records_for_round,
                      utility_summary)
from .robust_agg import AggregatorConfig, FilterOutcome, aggregate, bias, dominant_eigen, removal_cap
from .watermark import (DetectionResult, KgwSpec, KthSpec, key_sequence, kgw_generate_batch,
                        kgw_radioactivity_detect, kth_generate_batch, kth_radioactivity_detect)

log = logging.getLogger(__name__)

STATE_VERSION = 1
OFR_EMPTY_NOTE = "layers with an empty filtered set contribute 0 to OFR and count in the mean"


@dataclass
class ClientProfile:
    id: int
    dataset: list[TokenSeq]
    is_watermarking: bool
    data_origin: str


def make_spec(wm: WatermarkConfig) -> KgwSpec | KthSpec:
    if wm.scheme == "kgw":
        return KgwSpec(key=wm.key, gamma=wm.gamma, delta=wm.delta, kgram=wm.kgram,
                       temperature=wm.temperature)
    penalty = math.inf if wm.edit_penalty is None else wm.edit_penalty
    return KthSpec(key=wm.key, key_length=wm.key_length, n_resamples=wm.n_resamples,
                   edit_penalty=penalty)


# ---------------------------------------------------------------------------
# client data


def usable_documents(docs: Sequence[TokenSeq], prompt_length: int) -> list[TokenSeq]:
    """Documents long enough to split into a prompt and a continuation."""
    keep = [d for d in docs if len(d) > prompt_length]
    if len(keep) < len(docs):
        log.warning("skipped %d document(s) shorter than the %d-token prompt",
                    len(docs) - len(keep), prompt_length + 1)
    return keep


def _continue(docs: list[TokenSeq], prompt_length: int,
              sampler: Callable[[np.ndarray, int], np.ndarray], origin: str) -> list[TokenSeq]:
    """Regenerate each document from its first ``prompt_length`` tokens to its original length."""
    by_len: dict[int, list[int]] = {}
    for j, d in enumerate(docs):
        by_len.setdefault(len(d), []).append(j)
    result: dict[int, TokenSeq] = {}
    for length in sorted(by_len):
        idx = by_len[length]
        prompts = np.stack([docs[j].tokens[:prompt_length] for j in idx])
        rows = sampler(prompts, length - prompt_length)
        for j, row in zip(idx, rows):
            result[j] = TokenSeq(row, origin, prompt_length)
    return [result[j] for j in range(len(docs))]


def watermark_documents(generator: ModelParams, docs: list[TokenSeq], spec: KgwSpec | KthSpec,
                        prompt_length: int, rng: np.random.Generator) -> list[TokenSeq]:
    if isinstance(spec, KgwSpec):
        def sampler(prompts, n):
            return kgw_generate_batch(generator, prompts, n, spec, rng)
    else:
        key = key_sequence(spec, generator.vocab_size)

        def sampler(prompts, n):
            offsets = rng.integers(0, key.length, size=len(prompts))
            return kth_generate_batch(generator, prompts, n, key, offsets, spec.shift_slicing)
    return _continue(docs, prompt_length, sampler, "synthetic-watermarked")


def synthetic_documents(generator: ModelParams, docs: list[TokenSeq], temperature: float,
                        prompt_length: int, rng: np.random.Generator) -> list[TokenSeq]:
    policy = DecodingPolicy.from_temperature(temperature)

    def sampler(prompts, n):
        return generate_batch(generator, prompts, n, policy, rng)
    return _continue(docs, prompt_length, sampler, "synthetic-clean")


def prepare_clients(pool: Sequence[TokenSeq], fl: FLConfig, spec: KgwSpec | KthSpec | None,
                    generator: ModelParams | None, prompt_length: int = 20) -> list[ClientProfile]:
    """IID equal shards; watermarking clients regenerate every document with the watermark.

    Clean clients keep natural text or, with ``fl.clean_data == "synthetic"``,
    regenerate it without a watermark (greedy for the green-list scheme,
    ``T = 1`` sampling for the key-sequence scheme unless configured).
    """
    docs = usable_documents(pool, prompt_length)
    need = fl.n_clients * fl.docs_per_client
    if len(docs) < need:
        raise ValueError(f"corpus too small: {fl.n_clients} clients x {fl.docs_per_client} documents "
                         f"needs {need}, have {len(docs)}")
    rng = np.random.default_rng([fl.seed, 0x5348])
    order = rng.permutation(len(docs))
    wm_ids = set(int(i) for i in rng.choice(fl.n_clients, fl.n_watermarking, replace=False))
    if (wm_ids or fl.clean_data == "synthetic") and generator is None:
        raise ValueError("a generator model is needed for synthetic client data")
    if wm_ids and spec is None:
        raise ValueError("a watermark spec is needed when n_watermarking > 0")
    temp = fl.synthetic_temperature
    if temp is None:
        temp = 1.0 if isinstance(spec, KthSpec) else 0.0
    clients = []
    for i in range(fl.n_clients):
        shard = [docs[j] for j in order[i * fl.docs_per_client:(i + 1) * fl.docs_per_client]]
        crng = np.random.default_rng([fl.seed, 0x4745, i])
        if i in wm_ids:
            data = watermark_documents(generator, shard, spec, prompt_length, crng)
            clients.append(ClientProfile(i, data, True, "synthetic-watermarked"))
        elif fl.clean_data == "synthetic":
            data = synthetic_documents(generator, shard, temp, prompt_length, crng)
            clients.append(ClientProfile(i, data, False, "synthetic-clean"))
        else:
            data = [TokenSeq(d.tokens, "natural", prompt_length) for d in shard]
            clients.append(ClientProfile(i, data, False, "natural"))
    return clients


# ---------------------------------------------------------------------------
# reports


@dataclass
class RoundReport:
    round: int
    val_loss: float
    filtered: list[list[int]]
    watermarking: list[int]
    er: float | None
    ofr: float | None
    empty_filter_layers: int
    bias: float
    beta_hat: float
    iterations: list[int]
    eigenvalues: list[float]
    removal_cap: int
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class ExperimentReport:
    rounds: list[RoundReport]
    stopping_round: int
    best_round: int
    early_stopped: bool
    final_model_round: int
    pre_detection: dict
    detection: dict
    utility: dict
    headline: dict
    config_hash: str = ""
    notes: list[str] = field(default_factory=lambda: [OFR_EMPTY_NOTE])
    final_model: ModelParams | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return _clean({
            "config_hash": self.config_hash,
            "stopping_round": self.stopping_round,
            "best_round": self.best_round,
            "early_stopped": self.early_stopped,
            "final_model_round": self.final_model_round,
            "headline": self.headline,
            "pre_detection": self.pre_detection,
            "detection": self.detection,
            "utility": self.utility,
            "rounds": [r.to_dict() for r in self.rounds],
            "notes": self.notes,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    """JSON-safe copy: infinities become strings, NaN becomes null."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    return obj


ROUND_CSV_COLUMNS = ("round", "er", "ofr", "empty_filter_layers", "bias", "beta_hat", "val_loss")


def rounds_csv(rounds: Sequence[RoundReport]) -> str:
    lines = [",".join(ROUND_CSV_COLUMNS)]
    for r in rounds:
        vals = []
        for col in ROUND_CSV_COLUMNS:
            v = getattr(r, col)
            vals.append("" if v is None else repr(float(v)) if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# early stopping


def stopping_round(losses: Sequence[float], patience: int, mode: str = "previous",
                   start: int = 1) -> tuple[int | None, int]:
    """First round at which the loss has worsened ``patience`` times in a row.

    ``losses[i]`` belongs to round ``start + i``. "Worse" means strictly
    above the previous round (``mode="previous"``) or above the best loss so
    far (``mode="best"``). Returns ``(stop_round or None, best_round)``.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if mode not in ("previous", "best"):
        raise ValueError(f"unknown stop mode {mode!r}")
    if not losses:
        raise ValueError("no losses")
    best_i, streak = 0, 0
    for i in range(1, len(losses)):
        ref = losses[i - 1] if mode == "previous" else losses[best_i]
        streak = streak + 1 if losses[i] > ref else 0
        if losses[i] < losses[best_i]:
            best_i = i
        if streak >= patience:
            return start + i, start + best_i
    return None, start + best_i


# ---------------------------------------------------------------------------
# one round


@dataclass
class ServerState:
    model: ModelParams
    adam: Adam
    round: int = 0
    losses: list[float] = field(default_factory=list)
    best_vector: np.ndarray | None = None
    reports: list[RoundReport] = field(default_factory=list)


def client_updates(model: ModelParams, clients: Sequence[ClientProfile], fl: FLConfig,
                   round_index: int, jobs: int = 1) -> np.ndarray:
    """Every client's local delta, stacked in client order."""
    def work(c: ClientProfile) -> np.ndarray:
        rng = np.random.default_rng([fl.seed, round_index, c.id, 0x4C54])
        return local_train(model, c.dataset, fl.local_steps, fl.client_lr, fl.batch_size, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return np.stack(list(ex.map(work, clients)))
    return np.stack([work(c) for c in clients])


def server_aggregate(updates: np.ndarray, layer_slices: Sequence[slice], layer_names: Sequence[str],
                     config: AggregatorConfig, round_index: int) -> FilterOutcome:
    """The only aggregation entry point: sees update vectors and nothing else."""
    return aggregate(np.asarray(updates, dtype=np.float64), layer_slices, config, round_index, layer_names)


def clean_statistics(updates: np.ndarray, clean_ids: Sequence[int]) -> tuple[np.ndarray, float]:
    """Mean and covariance spectral norm of the clean rows (evaluation only)."""
    X = updates[list(clean_ids)]
    mu = X.mean(axis=0)
    if len(X) < 2:
        return mu, 0.0
    s = np.linalg.svd(X - mu, compute_uv=False)
    return mu, float(s[0] ** 2 / len(X))


def evaluate_round(round_index: int, outcome: FilterOutcome, updates: np.ndarray,
                   clients: Sequence[ClientProfile], val_loss: float, cap: int) -> RoundReport:
    wm = [c.id for c in clients if c.is_watermarking]
    pos = {c.id: k for k, c in enumerate(clients)}
    filtered_ids = [sorted(clients[k].id for k in f) for f in outcome.filtered]
    recs = records_for_round(outcome.layer_names, filtered_ids, wm)
    er = evasion_rate(recs) if wm else None
    ofr = overfiltering_rate(recs)
    clean_rows = [pos[c.id] for c in clients if not c.is_watermarking]
    mu_c, lam_c = clean_statistics(updates, clean_rows)
    b, beta = bias(outcome.mean, mu_c, lam_c)
    return RoundReport(round_index, val_loss, filtered_ids, wm, er, ofr, empty_filter_layers(recs),
                       b, beta, list(outcome.iterations), [float(x) for x in outcome.eigenvalues], cap)


def dump_round(writer, round_index: int, updates: np.ndarray, model: ModelParams, seed: int) -> None:
    """Write raw per-layer updates and their projections on the top covariance direction."""
    for li, (name, sl) in enumerate(zip(model.layout.layer_names, model.layout.layer_slices)):
        X = updates[:, sl]
        if X.shape[0] >= 2:
            _, v = dominant_eigen(X, rng=np.random.default_rng([seed, round_index, li, 0x44]))
            proj = (X - X.mean(axis=0)) @ v
        else:
            proj = np.zeros(X.shape[0])
        writer.write(round_index, name, X, proj)


def run_round(state: ServerState, clients: Sequence[ClientProfile], fl: FLConfig,
              agg: AggregatorConfig, val_set: Sequence[TokenSeq], jobs: int = 1,
              dump=None) -> RoundReport:
    """Advance ``state`` by one round in place and return the round's report."""
    t0 = time.perf_counter()
    r = state.round + 1
    model = state.model
    U = client_updates(model, clients, fl, r, jobs)
    if dump is not None:
        dump_round(dump, r, U, model, agg.seed)
    outcome = server_aggregate(U, model.layout.layer_slices, model.layout.layer_names, agg, r)
    new_vec = state.adam.step(model.vector, -outcome.mean)
    if not np.all(np.isfinite(new_vec)):
        raise NumericalError(f"non-finite parameters after server step in round {r}")
    state.model = model.replace(new_vec)
    val = cross_entropy(state.model, val_set)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite validation loss in round {r}")
    cap = removal_cap(agg.eps, len(clients)) if agg.kind == "robust" else 0
    report = evaluate_round(r, outcome, U, clients, val, cap)
    report.wall_time = time.perf_counter() - t0
    state.round = r
    return report


# ---------------------------------------------------------------------------
# detection


def radioactivity(model: ModelParams, docs: Sequence[TokenSeq], spec: KgwSpec | KthSpec,
                  alpha: float) -> DetectionResult:
    if isinstance(spec, KgwSpec):
        return kgw_radioactivity_detect(model, docs, spec, alpha)
    return kth_radioactivity_detect(model, docs, spec, alpha)


def _summary(r: DetectionResult) -> dict:
    return {"scheme": r.scheme, "score": r.score, "count": r.count, "z": r.z,
            "p_value": r.p_value, "decision": r.decision, "alpha": r.alpha}


def detect_all(model: ModelParams, clients: Sequence[ClientProfile], spec: KgwSpec | KthSpec,
               alpha: float = 0.01) -> dict:
    """Radioactivity per watermarking client and on their pooled data.

    Each call starts from a fresh dedup set, so the pooled count is not the
    sum of the per-client counts when clients share (k-gram, token) pairs.
    """
    wm = [c for c in clients if c.is_watermarking]
    if not wm:
        raise ValueError("no watermarking clients to test")
    per = {str(c.id): _summary(radioactivity(model, c.dataset, spec, alpha)) for c in wm}
    pooled = [d for c in wm for d in c.dataset]
    return {"per_client": per, "aggregated": _summary(radioactivity(model, pooled, spec, alpha))}


# ---------------------------------------------------------------------------
# full experiment


def _save_state(state: ServerState, directory: Path, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / "state.tmp.npz"
    np.savez(tmp, vector=state.model.vector, m=state.adam.m, v=state.adam.v,
             best=state.best_vector if state.best_vector is not None else state.model.vector)
    info = {"version": STATE_VERSION, "round": state.round, "t": state.adam.t,
            "losses": state.losses, "reports": [asdict(r) for r in state.reports], **meta}
    (directory / "state.tmp.json").write_text(json.dumps(_clean(info)))
    os.replace(tmp, directory / "state.npz")
    os.replace(directory / "state.tmp.json", directory / "state.json")


def _load_state(state: ServerState, directory: Path, config_hash: str) -> bool:
    js, npz = directory / "state.json", directory / "state.npz"
    if not (js.exists() and npz.exists()):
        return False
    info = json.loads(js.read_text())
    if info.get("config_hash") != config_hash:
        raise ValueError("saved state belongs to a different configuration")
    arrays = np.load(npz)
    state.model = state.model.replace(arrays["vector"])
    state.adam.m, state.adam.v, state.adam.t = arrays["m"], arrays["v"], info["t"]
    state.best_vector = arrays["best"]
    state.round = info["round"]
    state.losses = list(info["losses"])
    state.reports = []
    for d in info["reports"]:
        d = {k: (math.inf if v == "inf" else v) for k, v in d.items()}
        state.reports.append(RoundReport(**d))
    return True


def run_experiment(fl: FLConfig, agg: AggregatorConfig, clients: Sequence[ClientProfile],
                   init_model: ModelParams, val_set: Sequence[TokenSeq], spec: KgwSpec | KthSpec | None,
                   eval_sets: Mapping[str, Sequence[TokenSeq]] | None = None, alpha: float = 0.01,
                   jobs: int = 1, state_dir: str | Path | None = None, resume: bool = False,
                   dump_path: str | Path | None = None, config_hash: str = "") -> ExperimentReport:
    """Rounds until early stopping (or ``fl.max_rounds``), then radioactivity tests."""
    if not val_set:
        raise ValueError("validation set must be nonempty")
    sizes = {len(c.dataset) for c in clients}
    if len(sizes) != 1:
        raise ValueError("clients must hold equally sized datasets")
    state = ServerState(init_model.copy(), Adam(fl.server_lr, fl.adam_beta1, fl.adam_beta2, fl.adam_eps))
    state_dir = Path(state_dir) if state_dir is not None else None
    resumed = bool(resume and state_dir is not None and _load_state(state, state_dir, config_hash))
    if not resumed:
        state.losses = [cross_entropy(init_model, val_set)]
        state.best_vector = init_model.vector.copy()
    stop, best = stopping_round(state.losses, fl.patience, fl.stop_mode, start=0)
    dump = None
    if dump_path is not None:
        from .formats import UpdateDumpWriter
        dump = UpdateDumpWriter(dump_path, append=resumed, keep_through=state.round)
    try:
        while stop is None and state.round < fl.max_rounds:
            rep = run_round(state, clients, fl, agg, val_set, jobs, dump)
            state.reports.append(rep)
            state.losses.append(rep.val_loss)
            stop, best = stopping_round(state.losses, fl.patience, fl.stop_mode, start=0)
            if best == state.round:
                state.best_vector = state.model.vector.copy()
            if state_dir is not None:
                _save_state(state, state_dir, {"config_hash": config_hash})
    finally:
        if dump is not None:
            dump.close()
    final = state.model.replace(state.best_vector) if fl.rollback else state.model
    final_round = best if fl.rollback else state.round
    wm_present = spec is not None and any(c.is_watermarking for c in clients)
    pre = detect_all(init_model, clients, spec, alpha) if wm_present else {}
    post = detect_all(final, clients, spec, alpha) if wm_present else {}
    sets = {"validation": val_set, **(eval_sets or {})}
    utility = utility_summary(final, sets)
    first = state.reports[0] if state.reports else None
    headline = {"round": 1, "er": first.er if first else None, "ofr": first.ofr if first else None,
                "empty_filter_layers": first.empty_filter_layers if first else None}
    return ExperimentReport(state.reports, state.round, best, stop is not None, final_round,
                            pre, post, utility, headline, config_hash, final_model=final)
