import numpy as np
import pytest

from userembed.fstore import FeatureStore, StoreConfig
from userembed.model import UserFeatures
from userembed.service import EmbeddingService, ServingMode, SimClock
from userembed.snapshot import ModelSnapshot
from userembed.wire import (
    EmbeddingServer,
    WireError,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    request_embedding,
)


def features():
    return UserFeatures(
        sparse=(("interest_00", (12345678901234567890, 42)), ("account_00", (7,))),
        dense=np.array([0.5, -1.25, 3.0], dtype=np.float32),
    )


class TestCodec:
    def test_request_round_trip(self):
        frame = encode_request(9, 77, features())
        rid, uid, feats = decode_request(frame[4:])
        assert rid == 9 and uid == 77
        assert feats.sparse == features().sparse
        np.testing.assert_array_equal(feats.dense, features().dense)

    def test_response_round_trip(self):
        emb = np.arange(8, dtype=np.float32).reshape(2, 4)
        frame = encode_response(3, "async_cached", (5, 4), emb, 1234)
        resp = decode_response(frame[4:])
        assert resp.request_id == 3
        assert resp.provenance == "async_cached"
        assert resp.versions == (5, 4)
        np.testing.assert_array_equal(resp.embedding, emb.reshape(-1))
        assert resp.service_time_us == 1234

    def test_trailing_bytes_rejected(self):
        frame = encode_request(1, 2, features())
        with pytest.raises(WireError):
            decode_request(frame[4:] + b"\x00")

    def test_bad_version_rejected(self):
        frame = bytearray(encode_request(1, 2, features()))
        frame[4] = 99
        with pytest.raises(WireError, match="protocol version"):
            decode_request(bytes(frame[4:]))


class TestServer:
    def _start(self):
        def compute_fn(snap, user_id, feats):
            out = np.zeros((2, 4), dtype=np.float32)
            out[0, 0] = float(snap.version)
            out[0, 1] = float(user_id)
            return out

        arr = np.zeros((1, 1), dtype=np.float32)
        arr.setflags(write=False)
        snap = ModelSnapshot(version=1, trained_through_day=0, config_hash="0" * 64, params={"p": arr})
        store = FeatureStore(StoreConfig(k=2, dim=4, history=3, pool_window=3))
        service = EmbeddingService(compute_fn, store, ServingMode.async_serving(), workers=1)
        service.start(snap)
        server = EmbeddingServer(("127.0.0.1", 0), service)
        server.serve_in_background()
        return server, service

    def test_scripted_client_round_trip(self):
        server, service = self._start()
        try:
            host, port = server.server_address
            r1 = request_embedding(host, port, 1, 55, features())
            assert r1.request_id == 1
            assert r1.provenance == "async_cached"
            assert r1.versions == ()
            np.testing.assert_array_equal(r1.embedding, np.zeros(8, dtype=np.float32))
            service.drain()
            r2 = request_embedding(host, port, 2, 55, features())
            assert r2.request_id == 2
            assert r2.versions == (1,)
            assert r2.embedding[0] == 1.0 and r2.embedding[1] == 55.0
        finally:
            server.shutdown()
            service.stop()

    def test_many_requests_one_connection(self):
        import socket
        import struct
        from userembed.wire import _read_frame

        server, service = self._start()
        try:
            host, port = server.server_address
            with socket.create_connection((host, port), timeout=5.0) as sock:
                for rid in range(5):
                    sock.sendall(encode_request(rid, 10 + rid, features()))
                    frame = _read_frame(sock)
                    resp = decode_response(frame)
                    assert resp.request_id == rid
        finally:
            server.shutdown()
            service.stop()
