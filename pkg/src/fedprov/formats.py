"""On-disk formats. All binary data is little-endian; see docs/formats.md.

* checkpoint: ``FPCK`` magic, u16 version, u32 header length, JSON header
  (architecture), then one record per layer: u16 name length, UTF-8 name,
  u64 value count, float64 values.
* update dump: ``FPUD`` magic, u16 version, then a stream of records, one
  per (round, layer): u32 round, u16 name length, name, u32 N, u64 d,
  N*d float64 updates (row-major), N float64 projections.
* key file: JSON with a scheme tag, the key as hex and the hyperparameters.
* dataset: one JSONL file per client plus ``manifest.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .lm import ArchConfig, ModelParams, TokenSeq, Vocab
from .watermark import KgwSpec, KthSpec

CKPT_MAGIC = b"FPCK"
DUMP_MAGIC = b"FPUD"
FORMAT_VERSION = 1
KEY_FORMAT = "fedprov-key"
DATASET_FORMAT = "fedprov-dataset"


class FormatError(ValueError):
    """Malformed or unsupported file."""


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: ModelParams) -> bytes:
    header = json.dumps({"arch": asdict(model.arch)}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for name, values in model.layers():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(values)))
        out.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    arch = ArchConfig(**json.loads(data[pos:pos + hlen])["arch"])
    pos += hlen
    parts = []
    expected = list(ModelParams(arch, np.zeros(arch.n_params)).layout.layer_names)
    for name in expected:
        (nlen,) = struct.unpack_from("<H", data, pos)
        got = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        if got != name:
            raise FormatError(f"{path}: expected layer {name!r}, found {got!r}")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        parts.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64))
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return ModelParams(arch, np.concatenate(parts))


# ---------------------------------------------------------------------------
# update dumps


class UpdateDumpWriter:
    """Append-only writer for per-round, per-layer client updates."""

    def __init__(self, path: str | Path, append: bool = False, keep_through: int | None = None):
        """``append`` continues an existing dump; with ``keep_through`` it first
        drops every record of a later round and any torn trailing record."""
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        if not fresh and keep_through is not None:
            _truncate_dump(self.path, keep_through)
        self._fh: BinaryIO = open(self.path, "wb" if fresh else "ab")
        if fresh:
            self._fh.write(DUMP_MAGIC + struct.pack("<H", FORMAT_VERSION))

    def write(self, round_index: int, layer: str, updates: np.ndarray, projections: np.ndarray) -> None:
        updates = np.ascontiguousarray(updates, dtype="<f8")
        n, d = updates.shape
        raw = layer.encode()
        self._fh.write(struct.pack("<IH", round_index, len(raw)) + raw + struct.pack("<IQ", n, d))
        self._fh.write(updates.tobytes())
        self._fh.write(np.ascontiguousarray(projections, dtype="<f8").tobytes())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _truncate_dump(path: Path, keep_through: int) -> None:
    data = path.read_bytes()
    if data[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: not an update dump")
    pos = 6
    while pos + 6 <= len(data):
        rnd, nlen = struct.unpack_from("<IH", data, pos)
        head = pos + 6 + nlen
        if rnd > keep_through or head + 12 > len(data):
            break
        n, d = struct.unpack_from("<IQ", data, head)
        end = head + 12 + 8 * n * d + 8 * n
        if end > len(data):
            break
        pos = end
    if pos < len(data):
        with open(path, "r+b") as fh:
            fh.truncate(pos)


def read_update_dump(path: str | Path) -> Iterator[dict]:
    data = Path(path).read_bytes()
    if data[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: not an update dump")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    pos = 6
    while pos < len(data):
        rnd, nlen = struct.unpack_from("<IH", data, pos)
        pos += 6
        layer = data[pos:pos + nlen].decode()
        pos += nlen
        n, d = struct.unpack_from("<IQ", data, pos)
        pos += 12
        upd = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
        pos += 8 * n * d
        proj = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        yield {"round": rnd, "layer": layer, "updates": upd, "projections": proj}


# ---------------------------------------------------------------------------
# watermark keys


def key_record(spec: KgwSpec | KthSpec) -> dict:
    scheme = "kgw" if isinstance(spec, KgwSpec) else "kth"
    params = {f.name: getattr(spec, f.name) for f in fields(spec) if f.name != "key"}
    if scheme == "kth" and params["edit_penalty"] == float("inf"):
        params["edit_penalty"] = "inf"
    return {"format": KEY_FORMAT, "version": FORMAT_VERSION, "scheme": scheme,
            "key": f"{spec.key:016x}", "params": params}


def spec_from_record(rec: dict) -> KgwSpec | KthSpec:
    if rec.get("format") != KEY_FORMAT:
        raise FormatError("not a watermark key record")
    params = dict(rec["params"])
    key = int(rec["key"], 16)
    if rec["scheme"] == "kgw":
        return KgwSpec(key=key, **params)
    if rec["scheme"] == "kth":
        params["edit_penalty"] = float(params["edit_penalty"])
        return KthSpec(key=key, **params)
    raise FormatError(f"unknown scheme {rec['scheme']!r}")


def save_key(spec: KgwSpec | KthSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(key_record(spec), indent=2, sort_keys=True) + "\n")


def load_key(path: str | Path) -> KgwSpec | KthSpec:
    return spec_from_record(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# client datasets


def save_datasets(directory: str | Path, vocab: Vocab, clients, extra: dict | None = None) -> Path:
    """Write ``client_XXX.jsonl`` files and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clients:
        fname = f"client_{c.id:03d}.jsonl"
        with open(directory / fname, "w", encoding="utf-8") as fh:
            for j, doc in enumerate(c.dataset):
                row = {"doc": j, "origin": doc.origin, "prompt_len": doc.prompt_len,
                       "text": vocab.decode(doc.tokens)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        entries.append({"id": c.id, "file": fname, "n_docs": len(c.dataset),
                        "is_watermarking": c.is_watermarking, "data_origin": c.data_origin})
    manifest = {"format": DATASET_FORMAT, "version": FORMAT_VERSION,
                "vocab": list(vocab.chars), "clients": entries, **(extra or {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_datasets(directory: str | Path):
    """Inverse of :func:`save_datasets`; returns ``(vocab, clients, manifest)``."""
    from .fedsim import ClientProfile

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{directory}: not a dataset directory")
    vocab = Vocab(tuple(manifest["vocab"]))
    clients = []
    for e in manifest["clients"]:
        docs = []
        with open(directory / e["file"], encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                docs.append(TokenSeq(vocab.encode(row["text"]), row["origin"], row["prompt_len"]))
        clients.append(ClientProfile(e["id"], docs, e["is_watermarking"], e["data_origin"]))
    return vocab, clients, manifest
