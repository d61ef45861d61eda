"""Versioned per-user embedding cache with fp16 payloads and average pooling.

Reads never block on writes: each user's history is an immutable tuple that
writers atomically replace while holding a per-user lock. An optional
append-only log (length-prefixed, checksummed frames) makes the store
restartable.
"""

from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "FP16_MAX",
    "WRITE_CLAMP",
    "quantize_fp16",
    "dequantize_fp16",
    "StoreConfig",
    "EmbeddingRecord",
    "FeatureStore",
    "average_pool",
    "StoreLogError",
]

FP16_MAX = 65504.0
WRITE_CLAMP = 1e4       # model outputs are clamped here before storage


def quantize_fp16(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Round-to-nearest-even IEEE binary16; values beyond fp16 range saturate.

    Returns (fp16 array, saturated flag).
    """
    arr = np.asarray(values, dtype=np.float32)
    saturated = bool((np.abs(arr) > FP16_MAX).any())
    if saturated:
        arr = np.clip(arr, -FP16_MAX, FP16_MAX)
    return arr.astype(np.float16), saturated


def dequantize_fp16(payload: np.ndarray) -> np.ndarray:
    """Exact widening back to fp32."""
    return np.asarray(payload, dtype=np.float16).astype(np.float32)


@dataclass(frozen=True)
class StoreConfig:
    k: int = 2
    dim: int = 96
    history: int = 3         # versions retained per user (H)
    pool_window: int = 3     # P: current + up to P-1 cached versions

    def validate(self) -> None:
        if self.k < 1 or self.dim < 1:
            raise ValueError("k and dim must be positive")
        if not (self.pool_window - 1 >= 1):
            raise ValueError("pool window must be >= 2 (window of 1 pools nothing)")
        if not (self.history >= self.pool_window - 1):
            raise ValueError("history must retain at least pool_window - 1 versions")


@dataclass(frozen=True)
class EmbeddingRecord:
    user_id: int
    snapshot_version: int
    wall_time: float
    payload: np.ndarray          # [K x D] float16, read-only
    saturated: bool = False

    def embedding(self) -> np.ndarray:
        return dequantize_fp16(self.payload)


def average_pool(
    current: np.ndarray | None,
    cached: Sequence[EmbeddingRecord],
    window: int,
) -> np.ndarray:
    """Arithmetic mean of the current embedding plus up to window-1 cached
    versions (fewer when fewer exist). `current=None` pools cached only."""
    if window < 1:
        raise ValueError("pool window must be >= 1")
    parts = []
    if current is not None:
        parts.append(np.asarray(current, dtype=np.float32))
    for rec in cached[: window - 1]:
        parts.append(rec.embedding())
    if not parts:
        raise ValueError("nothing to pool: no current value and no cached records")
    if len(parts) == 1:
        return parts[0].copy()
    acc = parts[0].astype(np.float32, copy=True)
    for p in parts[1:]:
        acc += p
    acc /= len(parts)
    return acc


class StoreLogError(ValueError):
    """Persistence log frame is malformed or fails its checksum."""


_LOG_FRAME = struct.Struct("<IQQdBI")   # payload_len, user, version, time, saturated, crc32


class FeatureStore:
    """Thread-safe per-user embedding history, newest first, bounded depth."""

    def __init__(self, config: StoreConfig, log_path: str | Path | None = None):
        config.validate()
        self.config = config
        self._records: dict[int, tuple[EmbeddingRecord, ...]] = {}
        self._user_locks: dict[int, threading.Lock] = {}
        self._meta_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._log = open(log_path, "ab") if log_path is not None else None

    # -- write path

    def _lock_for(self, user_id: int) -> threading.Lock:
        lock = self._user_locks.get(user_id)
        if lock is None:
            with self._meta_lock:
                lock = self._user_locks.setdefault(user_id, threading.Lock())
        return lock

    def write(self, user_id: int, embedding: np.ndarray, snapshot_version: int, wall_time: float) -> EmbeddingRecord:
        emb = np.asarray(embedding, dtype=np.float32)
        if emb.shape != (self.config.k, self.config.dim):
            raise ValueError(
                f"embedding shape {emb.shape} does not match store ({self.config.k}, {self.config.dim})"
            )
        payload, saturated = quantize_fp16(np.clip(emb, -WRITE_CLAMP, WRITE_CLAMP))
        payload.setflags(write=False)
        rec = EmbeddingRecord(
            user_id=user_id,
            snapshot_version=snapshot_version,
            wall_time=wall_time,
            payload=payload,
            saturated=saturated,
        )
        with self._lock_for(user_id):
            old = self._records.get(user_id, ())
            self._records[user_id] = (rec,) + old[: self.config.history - 1]
            if self._log is not None:
                self._append_log(rec)
        return rec

    # -- read path (lock-free: history tuples are immutable)

    def read_latest(self, user_id: int, n: int) -> list[EmbeddingRecord]:
        if n < 1:
            raise ValueError("n must be >= 1")
        return list(self._records.get(user_id, ())[:n])

    def users(self) -> list[int]:
        return list(self._records.keys())

    def record_count(self, user_id: int) -> int:
        return len(self._records.get(user_id, ()))

    # -- persistence

    def _append_log(self, rec: EmbeddingRecord) -> None:
        body = rec.payload.astype("<f2").tobytes()
        crc = zlib.crc32(body)
        frame = _LOG_FRAME.pack(len(body), rec.user_id, rec.snapshot_version, rec.wall_time, int(rec.saturated), crc)
        with self._log_lock:
            self._log.write(frame + body)

    def flush(self) -> None:
        if self._log is not None:
            with self._log_lock:
                self._log.flush()

    def close(self) -> None:
        if self._log is not None:
            with self._log_lock:
                self._log.close()
                self._log = None

    @classmethod
    def replay_log(cls, config: StoreConfig, log_path: str | Path) -> "FeatureStore":
        """Rebuild a store by replaying an append-only log."""
        store = cls(config)
        data = Path(log_path).read_bytes()
        off = 0
        k, d = config.k, config.dim
        while off < len(data):
            if off + _LOG_FRAME.size > len(data):
                raise StoreLogError("truncated log frame header")
            length, user, version, wall, saturated, crc = _LOG_FRAME.unpack_from(data, off)
            off += _LOG_FRAME.size
            body = data[off : off + length]
            if len(body) != length:
                raise StoreLogError("truncated log frame body")
            if zlib.crc32(body) != crc:
                raise StoreLogError("log frame checksum mismatch")
            off += length
            payload = np.frombuffer(body, dtype="<f2").reshape(k, d).astype(np.float16)
            payload.setflags(write=False)
            rec = EmbeddingRecord(user, version, wall, payload, bool(saturated))
            old = store._records.get(user, ())
            store._records[user] = (rec,) + old[: config.history - 1]
        return store
