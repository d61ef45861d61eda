import threading
import time

import numpy as np
import pytest

from userembed.fstore import FeatureStore, StoreConfig
from userembed.service import (
    PROV_ASYNC,
    PROV_BATCH,
    PROV_FALLBACK,
    PROV_FROZEN,
    PROV_REALTIME,
    EmbeddingService,
    ServeRequest,
    ServiceError,
    ServingMode,
    SimClock,
)
from userembed.snapshot import ModelSnapshot


K, D = 2, 4


def snap(version, day=None):
    arr = np.full((1, 1), float(version), dtype=np.float32)
    arr.setflags(write=False)
    return ModelSnapshot(
        version=version,
        trained_through_day=day if day is not None else version,
        config_hash="0" * 64,
        params={"p": arr},
    )


def emb_for(version, user_id, slot=0):
    out = np.zeros((K, D), dtype=np.float32)
    out[0, 0] = float(version)
    out[0, 1] = float(user_id)
    out[1, 0] = float(slot)
    return out


def compute_fn(snapshot, user_id, features):
    return emb_for(snapshot.version, user_id, features if isinstance(features, int) else 0)


def store_():
    return FeatureStore(StoreConfig(k=K, dim=D, history=3, pool_window=3))


def sim_service(mode, compute_delay=0.0, fn=compute_fn, capacity=1024):
    service = EmbeddingService(
        fn,
        store_(),
        mode,
        clock=SimClock(),
        compute_delay=compute_delay,
        queue_capacity=capacity,
    )
    service.start(snap(1))
    return service


def req(request_id, user_id, t, features=0):
    return ServeRequest(request_id=request_id, user_id=user_id, features=features, arrival_time=t)


class TestAsyncMode:
    def test_cold_start_returns_zero_embedding(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=5.0)
        resp = service.serve(req(1, 42, 0.0))
        assert resp.provenance == PROV_ASYNC
        assert resp.versions == ()
        np.testing.assert_array_equal(resp.embedding, np.zeros((K, D)))

    def test_second_request_sees_first_compute(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=5.0)
        service.serve(req(1, 42, 0.0))
        resp = service.serve(req(2, 42, 10.0))
        assert resp.versions == (1,)
        np.testing.assert_array_equal(resp.embedding, emb_for(1, 42))

    def test_response_never_waits_for_compute(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=1e6)
        resp = service.serve(req(1, 7, 0.0))
        assert resp.provenance == PROV_ASYNC
        assert resp.service_time == 0.0
        assert service.store.read_latest(7, 1) == []

    def test_pool_of_two_cached_versions(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=1.0)
        service.serve(req(1, 5, 0.0))
        service.serve(req(2, 5, 10.0))
        service.swap_snapshot(snap(2))
        service.serve(req(3, 5, 20.0))
        resp = service.serve(req(4, 5, 30.0))
        assert resp.versions == (2, 1)
        expected = (emb_for(2, 5) + emb_for(1, 5)) / 2.0
        np.testing.assert_allclose(resp.embedding, expected)

    def test_coalescing_skips_duplicate_user(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=100.0)
        service.serve(req(1, 9, 0.0))
        service.serve(req(2, 9, 1.0))     # task for 9 still pending
        service.serve(req(3, 10, 2.0))
        m = service.metrics.snapshot()
        assert m["compute_requested"] == 3
        assert m["compute_coalesced"] == 1
        service.drain()
        assert m["compute_requested"] - service.metrics.compute_coalesced == service.metrics.compute_writes

    def test_queue_overflow_drops_but_read_path_succeeds(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=1e5, capacity=2)
        for i, user in enumerate((1, 2, 3, 4)):
            resp = service.serve(req(i, user, float(i)))
            assert resp.provenance == PROV_ASYNC
        m = service.metrics.snapshot()
        assert m["compute_dropped"] == 2
        assert m["requests_total"] == 4

    def test_accounting_identity_after_drain(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=3.0, capacity=3)
        rng = np.random.default_rng(0)
        for i in range(200):
            service.serve(req(i, int(rng.integers(0, 12)), i * 0.5))
        service.drain()
        m = service.metrics.snapshot()
        assert m["compute_writes"] == m["compute_requested"] - m["compute_coalesced"] - m["compute_dropped"]


class TestRealtimeMode:
    def test_within_budget_pools_current_and_cached(self):
        service = sim_service(ServingMode.realtime(budget_ms=50), compute_delay=0.01)
        r1 = service.serve(req(1, 3, 0.0))
        assert r1.provenance == PROV_REALTIME
        np.testing.assert_array_equal(r1.embedding, emb_for(1, 3))
        r2 = service.serve(req(2, 3, 10.0))
        assert r2.versions == (1, 1)
        np.testing.assert_allclose(r2.embedding, emb_for(1, 3))

    def test_over_budget_falls_back_to_cached(self):
        service = sim_service(ServingMode.realtime(budget_ms=30), compute_delay=0.1)
        r1 = service.serve(req(1, 3, 0.0))
        assert r1.provenance == PROV_FALLBACK
        assert r1.versions == ()
        service.drain()
        r2 = service.serve(req(2, 3, 10.0))
        assert r2.provenance == PROV_FALLBACK
        assert r2.versions == (1,)   # late write landed in the store

    def test_threaded_injected_delay_flags_fallback(self):
        store = store_()
        service = EmbeddingService(
            compute_fn, store, ServingMode.realtime(budget_ms=20), compute_delay=0.2,
        )
        service.start(snap(1))
        try:
            resp = service.serve(ServeRequest(1, 4, 0, 0.0))
            assert resp.provenance == PROV_FALLBACK
            service.drain()
            assert store.read_latest(4, 1)[0].snapshot_version == 1
        finally:
            service.stop()


class TestFrozenAndBatch:
    def test_frozen_pins_initial_snapshot_across_swaps(self):
        service = sim_service(ServingMode.frozen())
        r1 = service.serve(req(1, 2, 0.0))
        service.swap_snapshot(snap(5))
        r2 = service.serve(req(2, 2, 1.0))
        assert r1.versions == r2.versions == (1,)
        np.testing.assert_array_equal(r2.embedding, emb_for(1, 2))
        assert r2.provenance == PROV_FROZEN

    def test_batch_requires_job_and_misses_return_zero(self):
        service = sim_service(ServingMode.offline_batch())
        resp = service.serve(req(1, 2, 0.0))
        assert resp.provenance == PROV_BATCH
        assert resp.versions == ()
        np.testing.assert_array_equal(resp.embedding, np.zeros((K, D)))

    def test_batch_job_population_and_equivalence(self):
        service = sim_service(ServingMode.offline_batch())
        service.run_batch_job(snap(3), {7: 0, 8: 0}, day=2)
        resp = service.serve(req(1, 7, 0.0))
        assert resp.versions == (3,)
        np.testing.assert_array_equal(resp.embedding, compute_fn(snap(3), 7, 0))
        late = service.serve(req(2, 99, 0.0))
        assert late.versions == ()

    def test_batch_job_empty_population_rejected(self):
        service = sim_service(ServingMode.offline_batch())
        with pytest.raises(ValueError):
            service.run_batch_job(snap(3), {}, day=2)

    def test_batch_job_wrong_mode_rejected(self):
        service = sim_service(ServingMode.async_serving())
        with pytest.raises(ServiceError):
            service.run_batch_job(snap(3), {1: 0}, day=2)


class TestSwap:
    def test_version_regression_refused(self):
        service = sim_service(ServingMode.async_serving())
        service.swap_snapshot(snap(2))
        with pytest.raises(ServiceError):
            service.swap_snapshot(snap(2))
        with pytest.raises(ServiceError):
            service.swap_snapshot(snap(1))

    def test_tasks_started_after_swap_use_new_snapshot(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=5.0)
        service.serve(req(1, 1, 0.0))        # task A enqueued under v1
        service.swap_snapshot(snap(2))
        service.serve(req(2, 2, 1.0))        # task B under v2
        service.drain()
        assert service.store.read_latest(1, 1)[0].snapshot_version == 1
        assert service.store.read_latest(2, 1)[0].snapshot_version == 2

    def test_not_started_service_rejects_serve(self):
        service = EmbeddingService(compute_fn, store_(), ServingMode.async_serving(), clock=SimClock())
        with pytest.raises(ServiceError):
            service.serve(req(1, 1, 0.0))


class TestMetrics:
    def test_fresh_service_all_zeros(self):
        service = sim_service(ServingMode.async_serving())
        m = service.metrics.snapshot()
        assert m["requests_total"] == 0
        assert m["compute_writes"] == 0
        assert m["fallbacks"] == 0
        assert m["provenance_counts"] == {}
        assert m["read_p99_ms"] == 0.0

    def test_provenance_counts_sum_to_requests(self):
        service = sim_service(ServingMode.async_serving(), compute_delay=2.0)
        for i in range(50):
            service.serve(req(i, i % 7, float(i)))
        m = service.metrics.snapshot()
        assert sum(m["provenance_counts"].values()) == m["requests_total"] == 50

    def test_render_text_contains_counters(self):
        service = sim_service(ServingMode.async_serving())
        service.serve(req(1, 1, 0.0))
        text = service.metrics.render_text()
        assert "requests_total 1" in text
        assert "compute_requested" in text


class TestStalenessOrdering:
    def test_mean_staleness_monotone_across_schemes(self):
        """frozen >= batch >= async >= realtime on identical simulated traffic.

        Staleness of a response = (serve time - publish time of the newest
        snapshot used) + (serve time - compute time of the newest embedding
        content used). Publish time of version v is the end of its training
        day; day length is 100 simulated seconds here.
        """
        day_len = 100.0
        publish = {v: v * day_len for v in range(1, 10)}

        def staleness_run(kind, compute_delay=0.5):
            service = sim_service(kind, compute_delay=compute_delay)
            total, count = [], 0
            rid = 0
            for day in range(1, 9):
                if kind.kind in ("realtime", "async"):
                    if service.current_version() < day:
                        service.swap_snapshot(snap(day, day))
                if kind.kind == "offline_batch":
                    job_version = max(1, day - 1)
                    service.run_batch_job(snap(job_version, job_version), {u: 0 for u in range(6)}, day)
                for i in range(12):
                    rid += 1
                    t = day * day_len + i * (day_len / 12)
                    user = i % 6
                    resp = service.serve(req(rid, user, t))
                    if not resp.versions:
                        continue
                    newest = max(resp.versions)
                    model_staleness = t - publish[newest]
                    if kind.kind == "realtime" and resp.provenance == PROV_REALTIME:
                        content_lag = 0.0
                    elif kind.kind == "frozen":
                        content_lag = 0.0
                    elif kind.kind == "offline_batch":
                        content_lag = t - publish[newest]
                    else:
                        recs = service.store.read_latest(user, 1)
                        content_lag = max(0.0, t - recs[0].wall_time) if recs else 0.0
                    total.append(model_staleness + content_lag)
            return float(np.mean(total))

        frozen = staleness_run(ServingMode.frozen())
        batch = staleness_run(ServingMode.offline_batch())
        async_ = staleness_run(ServingMode.async_serving())
        realtime = staleness_run(ServingMode.realtime(budget_ms=1000.0))
        assert frozen >= batch >= async_ >= realtime


class TestDecouplingThreaded:
    def test_read_latency_independent_of_compute_delay(self):
        def p99_with_delay(delay):
            store = FeatureStore(StoreConfig(k=K, dim=D, history=3, pool_window=3))
            service = EmbeddingService(
                compute_fn, store, ServingMode.async_serving(), compute_delay=delay, workers=2,
            )
            service.start(snap(1))
            try:
                for i in range(3000):
                    service.serve(ServeRequest(i, i % 37, 0, 0.0))
                return service.metrics.percentile(99)
            finally:
                service.stop()

        fast = p99_with_delay(0.0)
        slow = p99_with_delay(0.1)
        assert slow < max(1.5 * fast, fast + 0.002)

    def test_every_compute_writes_exactly_once(self):
        store = FeatureStore(StoreConfig(k=K, dim=D, history=3, pool_window=3))
        service = EmbeddingService(
            compute_fn, store, ServingMode.async_serving(), compute_delay=0.001, workers=2,
            queue_capacity=64,
        )
        service.start(snap(1))
        try:
            for i in range(500):
                service.serve(ServeRequest(i, i % 25, 0, 0.0))
            service.drain()
            m = service.metrics.snapshot()
            assert m["compute_writes"] == m["compute_requested"] - m["compute_coalesced"] - m["compute_dropped"]
            total_records = sum(store.record_count(u) for u in store.users())
            assert total_records <= 25 * 3
        finally:
            service.stop()
