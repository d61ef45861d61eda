"""Embedding serving under four schemes, centered on async write-behind.

The async read path answers every request from cached versions immediately
and never waits on embedding computation: the compute for the current
request is queued (bounded, per-user coalesced) and written to the feature
store when it completes. The service runs against either a wall clock with
real worker threads, or a `SimClock`, where queued computes complete
deterministically as simulated time advances.
"""

from __future__ import annotations

import heapq
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .fstore import FeatureStore, average_pool
from .snapshot import ModelSnapshot

__all__ = [
    "PROV_ASYNC",
    "PROV_REALTIME",
    "PROV_BATCH",
    "PROV_FROZEN",
    "PROV_FALLBACK",
    "ServingMode",
    "ServeRequest",
    "ServeResponse",
    "WallClock",
    "SimClock",
    "ServiceMetrics",
    "EmbeddingService",
    "ServiceError",
]

PROV_ASYNC = "async_cached"
PROV_REALTIME = "realtime"
PROV_BATCH = "batch"
PROV_FROZEN = "frozen"
PROV_FALLBACK = "fallback_default"

_MODE_KINDS = ("frozen", "offline_batch", "realtime", "async")


class ServiceError(RuntimeError):
    """Service misuse: not started, bad mode, or version regression."""


@dataclass(frozen=True)
class ServingMode:
    kind: str
    budget_ms: float = 30.0

    def __post_init__(self):
        if self.kind not in _MODE_KINDS:
            raise ValueError(f"unknown serving mode {self.kind!r}")
        if self.kind == "realtime" and self.budget_ms <= 0:
            raise ValueError("realtime budget must be positive")

    @classmethod
    def frozen(cls) -> "ServingMode":
        return cls("frozen")

    @classmethod
    def offline_batch(cls) -> "ServingMode":
        return cls("offline_batch")

    @classmethod
    def realtime(cls, budget_ms: float = 30.0) -> "ServingMode":
        return cls("realtime", budget_ms=budget_ms)

    @classmethod
    def async_serving(cls) -> "ServingMode":
        return cls("async")


@dataclass(frozen=True)
class ServeRequest:
    request_id: int
    user_id: int
    features: object
    arrival_time: float = 0.0


@dataclass(frozen=True)
class ServeResponse:
    request_id: int
    embedding: np.ndarray
    provenance: str
    versions: tuple[int, ...]
    service_time: float


class WallClock:
    def now(self) -> float:
        return time.monotonic()


class SimClock:
    """Manually advanced clock for deterministic serving tests."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t


class ServiceMetrics:
    """Counters plus read/compute latency samples."""

    def __init__(self):
        self._lock = threading.Lock()
        self.read_latencies: list[float] = []
        self.compute_latencies: list[float] = []
        self.provenance_counts: dict[str, int] = {}
        self.requests_total = 0
        self.fallbacks = 0
        self.compute_requested = 0
        self.compute_coalesced = 0
        self.compute_dropped = 0
        self.compute_writes = 0
        self.queue_depth = 0
        self.queue_peak = 0

    def record_response(self, provenance: str, latency: float) -> None:
        with self._lock:
            self.requests_total += 1
            self.read_latencies.append(latency)
            self.provenance_counts[provenance] = self.provenance_counts.get(provenance, 0) + 1
            if provenance == PROV_FALLBACK:
                self.fallbacks += 1

    def percentile(self, q: float, which: str = "read") -> float:
        samples = self.read_latencies if which == "read" else self.compute_latencies
        if not samples:
            return 0.0
        return float(np.percentile(np.asarray(samples), q))

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests_total": self.requests_total,
                "provenance_counts": dict(self.provenance_counts),
                "fallbacks": self.fallbacks,
                "compute_requested": self.compute_requested,
                "compute_coalesced": self.compute_coalesced,
                "compute_dropped": self.compute_dropped,
                "compute_writes": self.compute_writes,
                "queue_depth": self.queue_depth,
                "queue_peak": self.queue_peak,
                "read_p50_ms": self.percentile(50) * 1e3,
                "read_p99_ms": self.percentile(99) * 1e3,
                "compute_p50_ms": self.percentile(50, "compute") * 1e3,
                "compute_p99_ms": self.percentile(99, "compute") * 1e3,
            }

    def render_text(self) -> str:
        snap = self.snapshot()
        lines = ["# serving metrics"]
        for key in sorted(snap):
            value = snap[key]
            if isinstance(value, dict):
                for sub in sorted(value):
                    lines.append(f"{key}.{sub} {value[sub]}")
            elif isinstance(value, float):
                lines.append(f"{key} {value:.6f}")
            else:
                lines.append(f"{key} {value}")
        return "\n".join(lines) + "\n"


@dataclass(order=True)
class _SimTask:
    completion_time: float
    seq: int
    user_id: int = field(compare=False)
    features: object = field(compare=False)
    snapshot: ModelSnapshot = field(compare=False)
    enqueue_time: float = field(compare=False, default=0.0)


class EmbeddingService:
    """One service instance per serving mode.

    compute_fn(snapshot, user_id, features) -> [K x D] fp32 array.
    """

    def __init__(
        self,
        compute_fn: Callable[[ModelSnapshot, int, object], np.ndarray],
        store: FeatureStore,
        mode: ServingMode,
        clock: WallClock | SimClock | None = None,
        pool_window: int | None = None,
        queue_capacity: int = 1024,
        workers: int = 1,
        compute_delay: float = 0.0,
        realtime_workers: int = 8,
    ):
        self.compute_fn = compute_fn
        self.store = store
        self.mode = mode
        self.clock = clock if clock is not None else WallClock()
        self.sim = isinstance(self.clock, SimClock)
        self.pool_window = pool_window if pool_window is not None else store.config.pool_window
        self.queue_capacity = queue_capacity
        self.compute_delay = compute_delay
        self.metrics = ServiceMetrics()
        self._workers_n = workers
        self._realtime_workers = realtime_workers
        self._initial: ModelSnapshot | None = None
        self._current: ModelSnapshot | None = None
        self._swap_lock = threading.Lock()
        self._batch_cache: dict[int, tuple[np.ndarray, int, int]] = {}
        self._zero = np.zeros((store.config.k, store.config.dim), dtype=np.float32)
        # async queue state (threaded)
        self._queue: list = []
        self._pending_users: set[int] = set()
        self._queue_cond = threading.Condition()
        self._in_flight = 0
        self._stop = False
        self._threads: list[threading.Thread] = []
        self._rt_pool: ThreadPoolExecutor | None = None
        # async queue state (simulated)
        self._sim_tasks: list[_SimTask] = []
        self._sim_seq = 0

    # -- lifecycle

    def start(self, snapshot: ModelSnapshot) -> None:
        if self._current is not None:
            raise ServiceError("service already started")
        self._initial = snapshot
        self._current = snapshot
        if not self.sim:
            if self.mode.kind == "async":
                for i in range(self._workers_n):
                    th = threading.Thread(target=self._worker_loop, name=f"compute-{i}", daemon=True)
                    th.start()
                    self._threads.append(th)
            if self.mode.kind == "realtime":
                self._rt_pool = ThreadPoolExecutor(max_workers=self._realtime_workers)

    def stop(self) -> None:
        with self._queue_cond:
            self._stop = True
            self._queue_cond.notify_all()
        for th in self._threads:
            th.join(timeout=5.0)
        self._threads.clear()
        if self._rt_pool is not None:
            self._rt_pool.shutdown(wait=True)
            self._rt_pool = None

    def swap_snapshot(self, new: ModelSnapshot) -> None:
        """Atomic: computes started after the swap use the new snapshot."""
        with self._swap_lock:
            if self._current is None:
                raise ServiceError("service not started")
            if new.version <= self._current.version:
                raise ServiceError(
                    f"snapshot version must increase: {new.version} <= {self._current.version}"
                )
            self._current = new

    def current_version(self) -> int:
        if self._current is None:
            raise ServiceError("service not started")
        return self._current.version

    # -- serve

    def serve(self, request: ServeRequest) -> ServeResponse:
        if self._current is None:
            raise ServiceError("service not started")
        if self.sim:
            self._sim_advance(request.arrival_time)
            response = self._serve_inner(request, request.arrival_time)
        else:
            t0 = self.clock.now()
            response = self._serve_inner(request, t0)
        self.metrics.record_response(response.provenance, response.service_time)
        return response

    def _serve_inner(self, request: ServeRequest, now: float) -> ServeResponse:
        kind = self.mode.kind
        if kind == "async":
            return self._serve_async(request, now)
        if kind == "realtime":
            return self._serve_realtime(request, now)
        if kind == "frozen":
            return self._serve_frozen(request, now)
        if kind == "offline_batch":
            return self._serve_batch(request, now)
        raise ServiceError(kind)

    def _elapsed(self, start: float) -> float:
        return 0.0 if self.sim else self.clock.now() - start

    def _serve_async(self, request: ServeRequest, now: float) -> ServeResponse:
        cached = self.store.read_latest(request.user_id, self.pool_window - 1)
        if cached:
            emb = average_pool(None, cached, self.pool_window)
            versions = tuple(r.snapshot_version for r in cached)
        else:
            emb = self._zero
            versions = ()
        self._enqueue_compute(request, now)
        return ServeResponse(
            request_id=request.request_id,
            embedding=emb,
            provenance=PROV_ASYNC,
            versions=versions,
            service_time=self._elapsed(now),
        )

    def _serve_realtime(self, request: ServeRequest, now: float) -> ServeResponse:
        budget = self.mode.budget_ms / 1e3
        cached = self.store.read_latest(request.user_id, self.pool_window - 1)
        snap = self._current
        if self.sim:
            if self.compute_delay <= budget:
                emb_now = self.compute_fn(snap, request.user_id, request.features)
                self.store.write(request.user_id, emb_now, snap.version, now + self.compute_delay)
                with self.metrics._lock:
                    self.metrics.compute_writes += 1
                    self.metrics.compute_requested += 1
                self.metrics.compute_latencies.append(self.compute_delay)
                pooled = average_pool(emb_now, cached, self.pool_window)
                return ServeResponse(
                    request_id=request.request_id,
                    embedding=pooled,
                    provenance=PROV_REALTIME,
                    versions=(snap.version,) + tuple(r.snapshot_version for r in cached),
                    service_time=self.compute_delay,
                )
            # over budget: fall back now, let the compute land later
            self._sim_schedule(request, now, snap)
            with self.metrics._lock:
                self.metrics.compute_requested += 1
            return self._fallback_response(request, cached, budget)
        # threaded
        assert self._rt_pool is not None, "realtime mode needs start()"
        with self._queue_cond:
            self._in_flight += 1
        future = self._rt_pool.submit(self._compute_and_write, snap, request, now)
        with self.metrics._lock:
            self.metrics.compute_requested += 1
        try:
            emb_now = future.result(timeout=budget)
        except FutureTimeoutError:
            return self._fallback_response(request, cached, self._elapsed(now))
        pooled = average_pool(emb_now, cached, self.pool_window)
        return ServeResponse(
            request_id=request.request_id,
            embedding=pooled,
            provenance=PROV_REALTIME,
            versions=(snap.version,) + tuple(r.snapshot_version for r in cached),
            service_time=self._elapsed(now),
        )

    def _fallback_response(self, request: ServeRequest, cached, service_time: float) -> ServeResponse:
        if cached:
            emb = average_pool(None, cached, self.pool_window)
            versions = tuple(r.snapshot_version for r in cached)
        else:
            emb = self._zero
            versions = ()
        return ServeResponse(
            request_id=request.request_id,
            embedding=emb,
            provenance=PROV_FALLBACK,
            versions=versions,
            service_time=service_time,
        )

    def _serve_frozen(self, request: ServeRequest, now: float) -> ServeResponse:
        emb = self.compute_fn(self._initial, request.user_id, request.features)
        service_time = self.compute_delay if self.sim else self._elapsed(now)
        return ServeResponse(
            request_id=request.request_id,
            embedding=emb,
            provenance=PROV_FROZEN,
            versions=(self._initial.version,),
            service_time=service_time,
        )

    def _serve_batch(self, request: ServeRequest, now: float) -> ServeResponse:
        hit = self._batch_cache.get(request.user_id)
        if hit is None:
            return ServeResponse(
                request_id=request.request_id,
                embedding=self._zero,
                provenance=PROV_BATCH,
                versions=(),
                service_time=self._elapsed(now),
            )
        emb, version, _day = hit
        return ServeResponse(
            request_id=request.request_id,
            embedding=emb,
            provenance=PROV_BATCH,
            versions=(version,),
            service_time=self._elapsed(now),
        )

    # -- batch job

    def run_batch_job(self, snapshot: ModelSnapshot, population: Mapping[int, object], day: int) -> None:
        """Precompute embeddings for the known population; replaces the cache."""
        if self.mode.kind != "offline_batch":
            raise ServiceError("batch jobs only run in offline_batch mode")
        if not population:
            raise ValueError("batch job population is empty")
        fresh = {}
        for user_id, feats in population.items():
            fresh[user_id] = (self.compute_fn(snapshot, user_id, feats), snapshot.version, day)
        self._batch_cache = fresh

    # -- async compute machinery (threaded)

    def _enqueue_compute(self, request: ServeRequest, now: float) -> None:
        if self.sim:
            with self.metrics._lock:
                self.metrics.compute_requested += 1
                if request.user_id in self._pending_users:
                    self.metrics.compute_coalesced += 1
                    return
                if len(self._sim_tasks) >= self.queue_capacity:
                    self.metrics.compute_dropped += 1
                    return
                self._pending_users.add(request.user_id)
                self.metrics.queue_depth = len(self._sim_tasks) + 1
                self.metrics.queue_peak = max(self.metrics.queue_peak, self.metrics.queue_depth)
            self._sim_schedule(request, now, self._current)
            return
        with self._queue_cond:
            self.metrics.compute_requested += 1
            if request.user_id in self._pending_users:
                self.metrics.compute_coalesced += 1
                return
            if len(self._queue) >= self.queue_capacity:
                self.metrics.compute_dropped += 1
                return
            self._pending_users.add(request.user_id)
            self._queue.append((request.user_id, request.features, now))
            self.metrics.queue_depth = len(self._queue)
            self.metrics.queue_peak = max(self.metrics.queue_peak, len(self._queue))
            self._queue_cond.notify()

    def _worker_loop(self) -> None:
        while True:
            with self._queue_cond:
                while not self._queue and not self._stop:
                    self._queue_cond.wait(timeout=0.2)
                if self._stop and not self._queue:
                    return
                user_id, features, enqueue_time = self._queue.pop(0)
                self._pending_users.discard(user_id)
                self.metrics.queue_depth = len(self._queue)
                self._in_flight += 1
            try:
                snap = self._current  # captured at task start
                if self.compute_delay > 0:
                    time.sleep(self.compute_delay)
                emb = self.compute_fn(snap, user_id, features)
                self.store.write(user_id, emb, snap.version, self.clock.now())
                with self.metrics._lock:
                    self.metrics.compute_writes += 1
                self.metrics.compute_latencies.append(self.clock.now() - enqueue_time)
            finally:
                with self._queue_cond:
                    self._in_flight -= 1
                    self._queue_cond.notify_all()

    def _compute_and_write(self, snap: ModelSnapshot, request: ServeRequest, start: float) -> np.ndarray:
        try:
            if self.compute_delay > 0:
                time.sleep(self.compute_delay)
            emb = self.compute_fn(snap, request.user_id, request.features)
            self.store.write(request.user_id, emb, snap.version, self.clock.now())
            with self.metrics._lock:
                self.metrics.compute_writes += 1
            self.metrics.compute_latencies.append(self.clock.now() - start)
            return emb
        finally:
            with self._queue_cond:
                self._in_flight -= 1
                self._queue_cond.notify_all()

    def drain(self, timeout: float = 30.0) -> None:
        """Wait until all queued/in-flight computes have written (tests)."""
        if self.sim:
            while self._sim_tasks:
                self._sim_advance(self._sim_tasks[0].completion_time)
            return
        deadline = time.monotonic() + timeout
        with self._queue_cond:
            while (self._queue or self._in_flight) and time.monotonic() < deadline:
                self._queue_cond.wait(timeout=0.1)
            if self._queue or self._in_flight:
                raise TimeoutError("drain timed out with work outstanding")

    # -- async compute machinery (simulated)

    def _sim_schedule(self, request: ServeRequest, now: float, snap: ModelSnapshot) -> None:
        self._sim_seq += 1
        task = _SimTask(
            completion_time=now + self.compute_delay,
            seq=self._sim_seq,
            user_id=request.user_id,
            features=request.features,
            snapshot=snap,
            enqueue_time=now,
        )
        heapq.heappush(self._sim_tasks, task)

    def _sim_advance(self, t: float) -> None:
        while self._sim_tasks and self._sim_tasks[0].completion_time <= t:
            task = heapq.heappop(self._sim_tasks)
            self.clock.advance_to(task.completion_time)
            self._pending_users.discard(task.user_id)
            emb = self.compute_fn(task.snapshot, task.user_id, task.features)
            self.store.write(task.user_id, emb, task.snapshot.version, task.completion_time)
            with self.metrics._lock:
                self.metrics.compute_writes += 1
                self.metrics.queue_depth = len(self._sim_tasks)
            self.metrics.compute_latencies.append(task.completion_time - task.enqueue_time)
        self.clock.advance_to(t)
