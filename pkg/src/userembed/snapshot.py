"""Versioned parameter snapshots and their binary container format.

A snapshot file holds (format version, config hash, snapshot version,
trained-through day, each tensor as name + shape + little-endian fp32
payload) followed by a sha256 of everything before it. Round-trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "SnapshotFormatError",
    "ModelSnapshot",
    "take_snapshot",
    "model_from_snapshot",
    "load_into_model",
    "save_snapshot",
    "load_snapshot",
]

_MAGIC = b"UESNAP1\n"
_FORMAT_VERSION = 1


class SnapshotFormatError(ValueError):
    """Snapshot file is malformed or fails its checksum."""


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of all model parameters plus publication metadata."""

    version: int
    trained_through_day: int
    config_hash: str
    params: Mapping[str, np.ndarray]

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("snapshot versions start at 1")


def take_snapshot(model, version: int, trained_through_day: int) -> ModelSnapshot:
    """Copy the model's parameters into a read-only snapshot."""
    params = {}
    for name, tensor in model.params.items():
        arr = np.array(tensor.data, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        params[name] = arr
    return ModelSnapshot(
        version=version,
        trained_through_day=trained_through_day,
        config_hash=model.config.config_hash(),
        params=params,
    )


def model_from_snapshot(config, snap: ModelSnapshot):
    """Inference-only model sharing the snapshot's (read-only) arrays."""
    from .model import UserModel

    if config.config_hash() != snap.config_hash:
        raise SnapshotFormatError("snapshot config hash does not match the model config")
    model = UserModel(config, seed=0)
    load_into_model(model, snap, trainable=False)
    return model


def load_into_model(model, snap: ModelSnapshot, trainable: bool = True) -> None:
    """Point the model's parameter tensors at the snapshot's values."""
    if set(model.params) != set(snap.params):
        missing = set(model.params) ^ set(snap.params)
        raise SnapshotFormatError(f"parameter names do not match: {sorted(missing)[:5]}")
    for name, tensor in model.params.items():
        src = snap.params[name]
        if src.shape != tensor.data.shape:
            raise SnapshotFormatError(
                f"parameter {name}: snapshot shape {src.shape} != model shape {tensor.data.shape}"
            )
        if trainable:
            tensor.data = np.array(src, dtype=np.float32, copy=True)
        else:
            tensor.data = src
            tensor.requires_grad = False
            tensor._track = False


def save_snapshot(snap: ModelSnapshot, path: str | Path) -> str:
    """Write the container; returns the file's sha256 hex digest."""
    parts = [_MAGIC, struct.pack("<H", _FORMAT_VERSION)]
    cfg = bytes.fromhex(snap.config_hash)
    if len(cfg) != 32:
        raise SnapshotFormatError("config hash must be a sha256 hex string")
    parts.append(cfg)
    parts.append(struct.pack("<Qq", snap.version, snap.trained_through_day))
    names = sorted(snap.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = snap.params[name]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    data = body + digest
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_snapshot(path: str | Path) -> ModelSnapshot:
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 2 + 32 + 16 + 4 + 32:
        raise SnapshotFormatError(f"{path}: truncated snapshot")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotFormatError(f"{path}: checksum mismatch")
    off = 0
    if body[: len(_MAGIC)] != _MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic")
    off += len(_MAGIC)
    (fmt,) = struct.unpack_from("<H", body, off)
    off += 2
    if fmt != _FORMAT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported format version {fmt}")
    config_hash = body[off : off + 32].hex()
    off += 32
    version, day = struct.unpack_from("<Qq", body, off)
    off += 16
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        rows, cols = struct.unpack_from("<II", body, off)
        off += 8
        nbytes = rows * cols * 4
        arr = np.frombuffer(body, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        arr = arr.astype(np.float32)
        arr.setflags(write=False)
        off += nbytes
        params[name] = arr
    if off != len(body):
        raise SnapshotFormatError(f"{path}: trailing bytes after last tensor")
    return ModelSnapshot(version=version, trained_through_day=day, config_hash=config_hash, params=params)
