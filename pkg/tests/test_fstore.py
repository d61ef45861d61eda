import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from userembed.fstore import (
    FP16_MAX,
    EmbeddingRecord,
    FeatureStore,
    StoreConfig,
    average_pool,
    dequantize_fp16,
    quantize_fp16,
)


def small_config(**kw):
    defaults = dict(k=2, dim=4, history=3, pool_window=3)
    defaults.update(kw)
    return StoreConfig(**defaults)


class TestQuantize:
    def test_one_is_exact(self):
        q, saturated = quantize_fp16(np.array([1.0], dtype=np.float32))
        assert not saturated
        assert dequantize_fp16(q)[0] == 1.0

    def test_tenth_within_half_ulp(self):
        q, _ = quantize_fp16(np.array([0.1], dtype=np.float32))
        err = abs(float(dequantize_fp16(q)[0]) - 0.1) / 0.1
        assert err <= 2.0**-11

    def test_overflow_saturates_with_flag(self):
        q, saturated = quantize_fp16(np.array([1e5, -1e5], dtype=np.float32))
        assert saturated
        back = dequantize_fp16(q)
        assert back[0] == FP16_MAX
        assert back[1] == -FP16_MAX

    def test_dequantize_is_exact_widening(self):
        vals = np.array([0.5, -2.25, 3.140625], dtype=np.float16)
        wide = dequantize_fp16(vals)
        assert wide.dtype == np.float32
        np.testing.assert_array_equal(wide.astype(np.float16), vals)

    @given(
        st.lists(
            st.floats(min_value=2.0**-14, max_value=1e4, allow_nan=False).map(float),
            min_size=1,
            max_size=50,
        ),
        st.booleans(),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_error_bound_normal_range(self, magnitudes, negate):
        v = np.asarray(magnitudes, dtype=np.float32)
        if negate:
            v = -v
        q, saturated = quantize_fp16(v)
        assert not saturated
        back = dequantize_fp16(q)
        rel = np.abs(back - v) / np.abs(v)
        assert rel.max() <= 2.0**-10


class TestAveragePool:
    def _rec(self, values, version=1, t=0.0, user=7):
        payload, _ = quantize_fp16(np.asarray(values, dtype=np.float32))
        return EmbeddingRecord(user, version, t, payload)

    def test_identical_vectors_idempotent(self):
        v = np.full((1, 3), 2.5, dtype=np.float32)
        out = average_pool(v, [self._rec(v), self._rec(v)], window=3)
        np.testing.assert_allclose(out, v)

    def test_hand_mean_over_two_available(self):
        current = np.array([[2.0]], dtype=np.float32)
        out = average_pool(current, [self._rec([[0.0]])], window=3)
        np.testing.assert_allclose(out, [[1.0]])

    def test_no_cache_returns_current(self):
        current = np.array([[1.0, -2.0]], dtype=np.float32)
        out = average_pool(current, [], window=3)
        np.testing.assert_array_equal(out, current)

    def test_window_one_is_identity(self):
        current = np.array([[1.5, 0.5]], dtype=np.float32)
        out = average_pool(current, [self._rec([[9.0, 9.0]])], window=1)
        np.testing.assert_array_equal(out, current)

    def test_cached_only_mode(self):
        out = average_pool(None, [self._rec([[4.0]]), self._rec([[2.0]])], window=3)
        np.testing.assert_allclose(out, [[3.0]])

    def test_nothing_to_pool_rejected(self):
        with pytest.raises(ValueError):
            average_pool(None, [], window=3)

    @given(st.integers(0, 2**32))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        vals = [rng.normal(size=(2, 3)).astype(np.float32) for _ in range(2)]
        recs = [self._rec(v) for v in vals]
        a = average_pool(None, recs, window=3)
        b = average_pool(None, recs[::-1], window=3)
        np.testing.assert_allclose(a, b, atol=1e-6)

    @given(st.integers(0, 2**32))
    @settings(max_examples=50, deadline=None)
    def test_contraction_identity(self, seed):
        # ||pool(a,c1,c2) - pool(b,c1,c2)|| == ||a - b|| / 3
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3)).astype(np.float32)
        b = rng.normal(size=(2, 3)).astype(np.float32)
        c = [self._rec(rng.normal(size=(2, 3)).astype(np.float32)) for _ in range(2)]
        lhs = np.linalg.norm(average_pool(a, c, 3) - average_pool(b, c, 3))
        rhs = np.linalg.norm(a - b) / 3.0
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, rhs)


class TestFeatureStore:
    def test_write_read_round_trip_within_fp16(self):
        store = FeatureStore(small_config())
        emb = np.random.default_rng(0).normal(size=(2, 4)).astype(np.float32)
        store.write(5, emb, snapshot_version=1, wall_time=10.0)
        recs = store.read_latest(5, 1)
        assert len(recs) == 1
        np.testing.assert_allclose(recs[0].embedding(), emb, rtol=2.0**-10, atol=2.0**-20)

    def test_eviction_beyond_history(self):
        store = FeatureStore(small_config(history=2))
        for version in (1, 2, 3):
            store.write(1, np.full((2, 4), float(version), dtype=np.float32), version, float(version))
        recs = store.read_latest(1, 5)
        assert [r.snapshot_version for r in recs] == [3, 2]

    def test_unknown_user_empty_not_error(self):
        store = FeatureStore(small_config())
        assert store.read_latest(999, 3) == []

    def test_single_write_read_three(self):
        store = FeatureStore(small_config())
        store.write(1, np.zeros((2, 4), dtype=np.float32), 1, 0.0)
        assert len(store.read_latest(1, 3)) == 1

    def test_newest_first_ordering(self):
        store = FeatureStore(small_config())
        for version in (1, 2, 3):
            store.write(1, np.full((2, 4), float(version), dtype=np.float32), version, float(version))
        recs = store.read_latest(1, 3)
        assert [r.snapshot_version for r in recs] == [3, 2, 1]
        assert recs[0].embedding()[0, 0] == 3.0

    def test_shape_mismatch_rejected(self):
        store = FeatureStore(small_config())
        with pytest.raises(ValueError, match="shape"):
            store.write(1, np.zeros((3, 4), dtype=np.float32), 1, 0.0)

    def test_write_clamps_to_bound(self):
        store = FeatureStore(small_config())
        store.write(1, np.full((2, 4), 5e4, dtype=np.float32), 1, 0.0)
        assert store.read_latest(1, 1)[0].embedding().max() <= 1e4

    def test_concurrent_writes_do_not_corrupt(self):
        store = FeatureStore(small_config(history=3))
        errors = []

        def writer(user_id):
            try:
                for i in range(200):
                    emb = np.full((2, 4), float(user_id * 1000 + i), dtype=np.float32)
                    store.write(user_id, emb, i + 1, float(i))
                    recs = store.read_latest(user_id, 3)
                    for r in recs:
                        vals = r.embedding()
                        assert (vals == vals[0, 0]).all()
                        assert int(vals[0, 0]) // 1000 == user_id
            except Exception as exc:  # pragma: no cover - failure reporting
                errors.append(exc)

        threads = [threading.Thread(target=writer, args=(uid,)) for uid in range(8)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert not errors
        for uid in range(8):
            assert store.record_count(uid) == 3

    def test_store_size_never_exceeds_history(self):
        store = FeatureStore(small_config(history=3))
        for i in range(20):
            store.write(1, np.zeros((2, 4), dtype=np.float32), i + 1, float(i))
            assert store.record_count(1) <= 3

    def test_log_replay_restores_state(self, tmp_path):
        log = tmp_path / "store.log"
        cfg = small_config()
        store = FeatureStore(cfg, log_path=log)
        rng = np.random.default_rng(1)
        for user in (1, 2):
            for version in (1, 2, 3, 4):
                store.write(user, rng.normal(size=(2, 4)).astype(np.float32), version, float(version))
        store.close()
        replayed = FeatureStore.replay_log(cfg, log)
        for user in (1, 2):
            orig = store.read_latest(user, 3)
            back = replayed.read_latest(user, 3)
            assert [r.snapshot_version for r in orig] == [r.snapshot_version for r in back]
            for a, b in zip(orig, back):
                np.testing.assert_array_equal(a.payload, b.payload)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            StoreConfig(k=2, dim=4, history=1, pool_window=3).validate()
