"""Binary checkpoint container.

Layout: ``b"LASF"``, u32 format version, u64 manifest length, the
manifest as sorted-key UTF-8 JSON, then raw little-endian float64 blocks
in manifest order (parameters, then Adam first and second moments).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, LasformerError
from .model import ModelConfig, Seq2Seq, parameter_manifest
from .optim import Adam, OptimConfig
from .sparsity import SparsityState
from .tensor import Tensor

MAGIC = b"LASF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(LasformerError):
    """Malformed or incompatible checkpoint file."""


def to_bytes(model: Seq2Seq, optimizer: Adam | None = None) -> bytes:
    names = [name for name, _ in parameter_manifest(model.config)]
    blocks: list[tuple[str, str, np.ndarray]] = [("param", n, model.params[n].data) for n in names]
    if optimizer is not None:
        blocks += [("adam.m", n, optimizer.m[n]) for n in names]
        blocks += [("adam.v", n, optimizer.v[n]) for n in names]
    tensors = []
    offset = 0
    for group, name, arr in blocks:
        tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "config": model.config.to_dict(),
        "step": model.step,
        "states": [
            {"kind": s.kind, "layer_index": s.layer_index, "k": s.k, "frozen_increase": s.frozen_increase}
            for s in sorted(model.states.values(), key=lambda s: (s.kind, s.layer_index))
        ],
        "optimizer": None if optimizer is None else {"t": optimizer.t, "config": optimizer.config.__dict__},
        "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, _, arr in blocks)
    return _HEADER.pack(MAGIC, VERSION, len(head)) + head + body


def save(path: str | Path, model: Seq2Seq, optimizer: Adam | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(model, optimizer))
    tmp.replace(path)


def from_bytes(raw: bytes) -> tuple[Seq2Seq, Adam | None]:
    if len(raw) < _HEADER.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    try:
        manifest = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    body = memoryview(raw)[start + n :]
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except TypeError as exc:
        raise ConfigError(f"checkpoint config: {exc}") from exc

    arrays: dict[tuple[str, str], np.ndarray] = {}
    for entry in manifest["tensors"]:
        key = (entry["group"], entry["name"])
        if key in arrays:
            raise CheckpointError(f"tensor {key} listed twice")
        size = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + 8 * size > len(body):
            raise CheckpointError(f"tensor {entry['name']} runs past end of file")
        arrays[key] = np.frombuffer(body[lo : lo + 8 * size], dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    expected = parameter_manifest(config)
    params = {}
    for name, shape in expected:
        arr = arrays.get(("param", name))
        if arr is None:
            raise CheckpointError(f"parameter {name} missing")
        if arr.shape != tuple(shape):
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {tuple(shape)}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    extra = {n for g, n in arrays if g == "param"} - {n for n, _ in expected}
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)[:5]}")

    model = Seq2Seq(config, params)
    model.step = int(manifest["step"])
    for s in manifest["states"]:
        key = (s["kind"], s["layer_index"])
        if key not in model.states:
            raise CheckpointError(f"sparsity state for unknown group {key}")
        model.states[key] = SparsityState(float(s["k"]), s["kind"], int(s["layer_index"]), bool(s["frozen_increase"]))

    optimizer = None
    if manifest["optimizer"] is not None:
        optimizer = Adam(params, OptimConfig(**manifest["optimizer"]["config"]))
        optimizer.t = int(manifest["optimizer"]["t"])
        for name, _ in expected:
            optimizer.m[name] = arrays[("adam.m", name)]
            optimizer.v[name] = arrays[("adam.v", name)]
    return model, optimizer


def load(path: str | Path) -> tuple[Seq2Seq, Adam | None]:
    return from_bytes(Path(path).read_bytes())
