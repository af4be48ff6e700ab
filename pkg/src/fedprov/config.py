"""Experiment configuration: nested dataclasses, strict JSON loading, presets.

Every field has a default, so a config file only lists what it changes.
Unknown keys anywhere in the tree are rejected before any compute starts.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .robust_agg import AggregatorConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class CorpusConfig:
    path: str | None = None          # None: the bundled help-topic prose
    doc_length: int = 256
    prompt_length: int = 20
    pretrain_fraction: float = 0.4
    pool_fraction: float = 0.5
    val_fraction: float = 0.05
    test_fraction: float = 0.05
    split_seed: int = 0

    def __post_init__(self):
        if self.doc_length < 2:
            raise ConfigError("corpus.doc_length must be >= 2")
        if self.prompt_length < 1:
            raise ConfigError("corpus.prompt_length must be >= 1")
        fr = (self.pretrain_fraction, self.pool_fraction, self.val_fraction, self.test_fraction)
        if min(fr) < 0 or sum(fr) > 1 + 1e-9:
            raise ConfigError("corpus split fractions must be nonnegative and sum to <= 1")


@dataclass(frozen=True)
class ModelConfig:
    context_length: int = 8
    hidden: int = 64
    n_layers: int = 1
    embed_dim: int = 16
    init_seed: int = 0
    pretrain_epochs: int = 2
    pretrain_docs: int | None = None   # None: the whole pretraining split
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 128


@dataclass(frozen=True)
class WatermarkConfig:
    scheme: str = "kgw"              # "kgw" | "kth"
    key: int = 15213
    gamma: float = 0.25
    delta: float = 3.0
    kgram: int = 2
    temperature: float = 0.8
    key_length: int = 256
    n_resamples: int = 99
    edit_penalty: float | None = None   # None: positional cost (no indels)
    alpha: float = 0.01

    def __post_init__(self):
        if self.scheme not in ("kgw", "kth"):
            raise ConfigError(f"watermark.scheme must be 'kgw' or 'kth', got {self.scheme!r}")


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 10
    n_watermarking: int = 3
    docs_per_client: int = 40
    server_lr: float = 1e-2
    client_lr: float = 0.1
    local_steps: int | None = None   # None: one local epoch
    batch_size: int = 64
    patience: int = 3
    max_rounds: int = 300
    stop_mode: str = "previous"      # "previous" | "best"
    rollback: bool = False
    clean_data: str = "natural"      # "natural" | "synthetic"
    synthetic_temperature: float | None = None   # None: 0 for kgw, 1 for kth
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("fl.n_clients must be >= 1")
        if not 0 <= self.n_watermarking or not 2 * self.n_watermarking < self.n_clients:
            raise ConfigError("fl.n_watermarking must satisfy 0 <= W < N/2")
        if self.patience < 1:
            raise ConfigError("fl.patience must be >= 1")
        if self.docs_per_client < 1 or self.max_rounds < 1 or self.batch_size < 1:
            raise ConfigError("fl.docs_per_client, max_rounds and batch_size must be >= 1")
        if self.stop_mode not in ("previous", "best"):
            raise ConfigError("fl.stop_mode must be 'previous' or 'best'")
        if self.clean_data not in ("natural", "synthetic"):
            raise ConfigError("fl.clean_data must be 'natural' or 'synthetic'")
        if self.server_lr <= 0 or self.client_lr <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def eps(self) -> float:
        return self.n_watermarking / self.n_clients


@dataclass(frozen=True)
class SweepConfig:
    n_watermarking: list = field(default_factory=list)
    aggregators: list = field(default_factory=list)
    seeds: list = field(default_factory=list)


@dataclass(frozen=True)
class BenchConfig:
    n_clients: int = 30
    eps: float = 0.1
    dims: list = field(default_factory=lambda: [100, 1000, 10000, 100000])
    trials: int = 20
    outlier_scale: float = 3.0
    use_bound: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    preset: str | None = None
    output_dir: str = "runs"
    jobs: int = 1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    generator: ModelConfig = field(default_factory=lambda: ModelConfig(hidden=128, init_seed=1, pretrain_epochs=4))
    global_model: ModelConfig = field(default_factory=lambda: ModelConfig(init_seed=2, pretrain_docs=200))
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    aggregator: AggregatorConfig = field(default_factory=lambda: AggregatorConfig(eps=0.3))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Reseed client sampling/training, the aggregator and the benchmark."""
        return self.replace(fl={"seed": seed}, aggregator={"seed": seed}, bench={"seed": seed})

    def replace(self, **changes) -> "ExperimentConfig":
        """Nested replace: ``cfg.replace(fl={"n_watermarking": 2}, jobs=2)``."""
        merged = _merge(self.to_dict(), changes)
        return from_dict(merged)


def _jsonable(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _merge(base: dict, changes: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path)
        else:
            kwargs[name] = _coerce(value, tp, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(value, tp, path: str):
    if value == "inf" and float in typing.get_args(tp) + (tp,):
        return math.inf
    origin = typing.get_origin(tp)
    allowed = typing.get_args(tp) if origin in (typing.Union, types.UnionType) else (tp,)
    if value is None:
        if type(None) in allowed:
            return None
        raise ConfigError(f"{path}: null not allowed")
    for a in allowed:
        a_origin = typing.get_origin(a) or a
        if a_origin is bool and isinstance(value, bool):
            return value
        if a_origin is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if a_origin is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if a_origin is str and isinstance(value, str):
            return value
        if a_origin is list and isinstance(value, list):
            return list(value)
    raise ConfigError(f"{path}: bad value {value!r}")


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


# ---------------------------------------------------------------------------
# presets

PRESETS: dict[str, dict] = {
    # N=10 clients, 3 watermarking (eps = 30%), plain averaging.
    "desk": {},
    "desk-active": {"aggregator": {"kind": "robust", "eps": 0.3}},
    "desk-kth": {"watermark": {"scheme": "kth"}},
    # eps sweep over N=30 clients with W in {2, 5, 9}, robust server.
    "table3-desk": {
        "fl": {"n_clients": 30, "docs_per_client": 12, "max_rounds": 150},
        "aggregator": {"kind": "robust"},
        "sweep": {"n_watermarking": [2, 5, 9], "seeds": [0, 1, 2]},
    },
    # Same sweep with plain averaging: radioactivity against eps.
    "eps-sweep-desk": {
        "fl": {"n_clients": 30, "docs_per_client": 12, "max_rounds": 150},
        "aggregator": {"kind": "average"},
        "sweep": {"n_watermarking": [2, 5, 9], "seeds": [0, 1, 2]},
    },
    # Clean clients on synthetic greedy text, watermark with delta = 0 and T = 0.
    "shift-ablation-desk": {
        "watermark": {"delta": 0.0, "temperature": 0.0},
        "fl": {"clean_data": "synthetic", "max_rounds": 1},
        "aggregator": {"kind": "robust", "eps": 0.3},
    },
    "bench-agg": {"bench": {"dims": [100, 1000, 10000, 100000], "trials": 20}},
    # Paper-sized counts. Far too slow for a desk machine; kept for reference.
    "paper": {
        "generator": {"context_length": 32, "hidden": 1024, "n_layers": 4, "embed_dim": 128},
        "global_model": {"context_length": 32, "hidden": 512, "n_layers": 4, "embed_dim": 64},
        "fl": {"n_clients": 30, "n_watermarking": 9, "server_lr": 1e-5, "client_lr": 1e-5,
               "max_rounds": 200},
        "aggregator": {"kind": "robust", "eps": 0.3, "chunk_factor": 8},
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return from_dict(_merge({"name": name, "preset": name}, PRESETS[name]))


def load_config(path: str | Path | None = None, preset_name: str | None = None) -> ExperimentConfig:
    """Preset (or defaults) overlaid with the JSON file at ``path``."""
    base = preset(preset_name).to_dict() if preset_name else ExperimentConfig().to_dict()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "preset" in data and data["preset"] and not preset_name:
            base = preset(data["preset"]).to_dict()
        base = _merge(base, data)
    return from_dict(base)
