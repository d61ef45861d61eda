#!/usr/bin/env python3
"""Soak the async service: sustained load with periodic snapshot swaps.

Usage: python scripts/run_soak.py [minutes] [requests_per_second]
Prints the metrics dump and verifies the compute accounting identity.
"""
import sys
import time

import numpy as np

from userembed.fstore import FeatureStore, StoreConfig
from userembed.model import UserModel, default_model_config
from userembed.service import EmbeddingService, ServeRequest, ServingMode
from userembed.snapshot import model_from_snapshot, take_snapshot
from userembed.synth import DriftConfig, LatentWorld, feature_names


def main() -> int:
    minutes = float(sys.argv[1]) if len(sys.argv) > 1 else 10.0
    rate = float(sys.argv[2]) if len(sys.argv) > 2 else 1000.0
    drift = DriftConfig(num_users=2000, num_ads=100, events_per_day=1000, seed=0)
    world = LatentWorld(drift)
    mc = default_model_config(feature_names(), drift.dense_inputs, drift.ad_inputs, tasks=drift.tasks)
    model = UserModel(mc, seed=0)

    models = {}

    def compute_fn(snap, user_id, feats):
        m = models.get(snap.version)
        if m is None:
            m = model_from_snapshot(mc, snap)
            models[snap.version] = m
        return m.user_embeddings(feats)

    store = FeatureStore(StoreConfig(k=mc.tower.k_embeddings, dim=mc.tower.dim, history=3, pool_window=3))
    service = EmbeddingService(compute_fn, store, ServingMode.async_serving(), workers=1, queue_capacity=4096)
    service.start(take_snapshot(model, 1, 0))
    feats = world.user_features(0, 0)
    rng = np.random.default_rng(0)
    deadline = time.monotonic() + minutes * 60.0
    next_swap = time.monotonic() + 30.0
    version = 1
    sent = 0
    period = 1.0 / rate
    next_t = time.monotonic()
    try:
        while time.monotonic() < deadline:
            uid = int(rng.integers(0, drift.num_users))
            service.serve(ServeRequest(sent, uid, feats[uid], 0.0))
            sent += 1
            if time.monotonic() >= next_swap:
                version += 1
                service.swap_snapshot(take_snapshot(model, version, version - 1))
                next_swap += 30.0
            next_t += period
            pause = next_t - time.monotonic()
            if pause > 0:
                time.sleep(pause)
        service.drain(timeout=120.0)
    finally:
        service.stop()
    m = service.metrics.snapshot()
    print(service.metrics.render_text())
    achieved = m["requests_total"] / (minutes * 60.0)
    balanced = m["compute_writes"] == m["compute_requested"] - m["compute_coalesced"] - m["compute_dropped"]
    lost = sent - m["requests_total"]
    print(f"achieved {achieved:.0f} req/s, swaps to v{version}, lost={lost}, accounting_balanced={balanced}")
    return 0 if (lost == 0 and balanced and achieved >= rate * 0.95) else 2


if __name__ == "__main__":
    sys.exit(main())
