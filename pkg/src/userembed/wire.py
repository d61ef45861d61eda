"""Length-prefixed binary request/response protocol and a threaded TCP server.

Frame: u32 payload length, then the payload. All integers little-endian.

Request payload:  u16 protocol version, u64 request_id, u64 user_id,
                  u16 n_sparse { u8 name_len, name utf8, u16 n_ids, u64 ids... },
                  u16 dense_len, fp32 dense values.
Response payload: u16 protocol version, u64 request_id, u8 provenance code,
                  u16 n_versions, u64 versions..., u32 value count,
                  fp32 embedding values, u32 service_time_us.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .model import UserFeatures
from .service import (
    PROV_ASYNC,
    PROV_BATCH,
    PROV_FALLBACK,
    PROV_FROZEN,
    PROV_REALTIME,
    EmbeddingService,
    ServeRequest,
)

__all__ = [
    "PROTOCOL_VERSION",
    "WireError",
    "encode_request",
    "decode_request",
    "encode_response",
    "decode_response",
    "WireResponse",
    "EmbeddingServer",
    "request_embedding",
]

PROTOCOL_VERSION = 1

_PROVENANCE_CODES = {
    PROV_ASYNC: 0,
    PROV_REALTIME: 1,
    PROV_BATCH: 2,
    PROV_FROZEN: 3,
    PROV_FALLBACK: 4,
}
_CODE_TO_PROVENANCE = {v: k for k, v in _PROVENANCE_CODES.items()}


class WireError(ValueError):
    """Malformed frame or protocol violation."""


def encode_request(request_id: int, user_id: int, features: UserFeatures) -> bytes:
    parts = [struct.pack("<HQQ", PROTOCOL_VERSION, request_id, user_id)]
    parts.append(struct.pack("<H", len(features.sparse)))
    for name, ids in features.sparse:
        raw = name.encode()
        if len(raw) > 255:
            raise WireError(f"feature name too long: {name!r}")
        parts.append(struct.pack("<B", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<H", len(ids)))
        parts.append(np.asarray(ids, dtype="<u8").tobytes())
    dense = np.ascontiguousarray(features.dense, dtype="<f4")
    parts.append(struct.pack("<H", dense.size))
    parts.append(dense.tobytes())
    payload = b"".join(parts)
    return struct.pack("<I", len(payload)) + payload


def decode_request(payload: bytes) -> tuple[int, int, UserFeatures]:
    try:
        version, request_id, user_id = struct.unpack_from("<HQQ", payload, 0)
        if version != PROTOCOL_VERSION:
            raise WireError(f"unsupported protocol version {version}")
        off = 18
        (n_sparse,) = struct.unpack_from("<H", payload, off)
        off += 2
        sparse = []
        for _ in range(n_sparse):
            (nlen,) = struct.unpack_from("<B", payload, off)
            off += 1
            name = payload[off : off + nlen].decode()
            off += nlen
            (n_ids,) = struct.unpack_from("<H", payload, off)
            off += 2
            ids = np.frombuffer(payload, dtype="<u8", count=n_ids, offset=off)
            off += 8 * n_ids
            sparse.append((name, tuple(int(x) for x in ids)))
        (dense_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        dense = np.frombuffer(payload, dtype="<f4", count=dense_len, offset=off).astype(np.float32)
        off += 4 * dense_len
    except (struct.error, UnicodeDecodeError) as exc:
        raise WireError(f"malformed request: {exc}") from exc
    if off != len(payload):
        raise WireError("trailing bytes in request")
    return request_id, user_id, UserFeatures(sparse=tuple(sparse), dense=dense)


@dataclass(frozen=True)
class WireResponse:
    request_id: int
    provenance: str
    versions: tuple[int, ...]
    embedding: np.ndarray
    service_time_us: int


def encode_response(
    request_id: int,
    provenance: str,
    versions: tuple[int, ...],
    embedding: np.ndarray,
    service_time_us: int,
) -> bytes:
    flat = np.ascontiguousarray(embedding, dtype="<f4").reshape(-1)
    parts = [
        struct.pack("<HQB", PROTOCOL_VERSION, request_id, _PROVENANCE_CODES[provenance]),
        struct.pack("<H", len(versions)),
        np.asarray(versions, dtype="<u8").tobytes(),
        struct.pack("<I", flat.size),
        flat.tobytes(),
        struct.pack("<I", service_time_us),
    ]
    payload = b"".join(parts)
    return struct.pack("<I", len(payload)) + payload


def decode_response(payload: bytes) -> WireResponse:
    try:
        version, request_id, code = struct.unpack_from("<HQB", payload, 0)
        if version != PROTOCOL_VERSION:
            raise WireError(f"unsupported protocol version {version}")
        off = 11
        (n_versions,) = struct.unpack_from("<H", payload, off)
        off += 2
        versions = tuple(int(x) for x in np.frombuffer(payload, dtype="<u8", count=n_versions, offset=off))
        off += 8 * n_versions
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        emb = np.frombuffer(payload, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
        (us,) = struct.unpack_from("<I", payload, off)
        off += 4
    except struct.error as exc:
        raise WireError(f"malformed response: {exc}") from exc
    if off != len(payload):
        raise WireError("trailing bytes in response")
    if code not in _CODE_TO_PROVENANCE:
        raise WireError(f"unknown provenance code {code}")
    return WireResponse(request_id, _CODE_TO_PROVENANCE[code], versions, emb, us)


def _read_frame(sock: socket.socket) -> bytes | None:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length > 16 * 1024 * 1024:
        raise WireError(f"frame of {length} bytes exceeds the 16 MiB cap")
    body = _read_exact(sock, length)
    if body is None:
        raise WireError("connection closed mid-frame")
    return body


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else None
        buf += chunk
    return buf


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: EmbeddingService = self.server.embedding_service
        while True:
            try:
                frame = _read_frame(self.request)
            except WireError:
                return
            if frame is None:
                return
            request_id, user_id, features = decode_request(frame)
            t0 = service.clock.now()
            resp = service.serve(
                ServeRequest(request_id=request_id, user_id=user_id, features=features, arrival_time=t0)
            )
            out = encode_response(
                resp.request_id,
                resp.provenance,
                resp.versions,
                resp.embedding,
                int(resp.service_time * 1e6),
            )
            self.request.sendall(out)


class EmbeddingServer(socketserver.ThreadingTCPServer):
    """Serves one EmbeddingService over the binary protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: EmbeddingService):
        super().__init__(address, _Handler)
        self.embedding_service = service

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def request_embedding(
    host: str,
    port: int,
    request_id: int,
    user_id: int,
    features: UserFeatures,
    timeout: float = 5.0,
) -> WireResponse:
    """One-shot client helper: connect, send one request, read one response."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(encode_request(request_id, user_id, features))
        frame = _read_frame(sock)
        if frame is None:
            raise WireError("server closed the connection without responding")
        return decode_response(frame)
