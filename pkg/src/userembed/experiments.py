"""Headline experiments: the serving-scheme comparison, the pooling
ablation, and the embedding-shift study.

Pipeline timing, shared by every arm: the snapshot covering day d publishes
after day d closes, so online serving during day d runs on the snapshot
trained through d-1 (swapped at the day boundary), while the nightly batch
dump for day d was built before the day started, from the snapshot trained
through d-lag and the features known at the end of day d-1.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, build_model_config
from .downstream import DownstreamModel
from .evaluation import embedding_shift_report, normalized_entropy, permutation_importance
from .fstore import FeatureStore, StoreConfig
from .model import UserModel
from .service import EmbeddingService, ServeRequest, ServingMode, SimClock
from .snapshot import ModelSnapshot, model_from_snapshot
from .trainer import SnapshotStore, Trainer
from .synth import LatentWorld

__all__ = [
    "ExperimentReport",
    "SCHEME_ARMS",
    "run_scheme_comparison",
    "run_pooling_ablation",
    "train_upstream",
    "MemoizedComputer",
]

DAY_SECONDS = 86400.0
SCHEME_ARMS = ("baseline", "frozen", "offline_batch", "realtime", "async")
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# report container


@dataclass
class ExperimentReport:
    kind: str
    fingerprint: str
    seeds: list[int]
    per_seed: dict
    aggregate: dict
    schema_version: int = SCHEMA_VERSION

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentReport":
        raw = json.loads(Path(path).read_text())
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported report schema {raw.get('schema_version')}")
        return cls(**raw)

    def render_text(self) -> str:
        lines = [
            f"experiment: {self.kind}",
            f"config fingerprint: {self.fingerprint}",
            f"seeds: {self.seeds}",
            "",
        ]
        for seed in map(str, self.seeds):
            block = self.per_seed[seed]
            lines.append(f"-- seed {seed}")
            for arm, stats in sorted(block["arms"].items()):
                diff = stats.get("ne_diff_pct")
                diff_txt = f"  diff {diff:+.3f}%" if diff is not None else ""
                train_ne = stats.get("train_ne")
                train_txt = f"  train NE {train_ne:.4f}" if train_ne is not None else ""
                lines.append(f"   {arm:14s} eval NE {stats['eval_ne']:.4f}{train_txt}{diff_txt}")
            if "bayes_ne" in block:
                lines.append(f"   {'bayes floor':14s} eval NE {block['bayes_ne']:.4f}")
        lines.append("")
        lines.append("aggregate:")
        for key in sorted(self.aggregate):
            lines.append(f"   {key}: {self.aggregate[key]}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared machinery


class MemoizedComputer:
    """Pure tower forwards cached by (snapshot version, user, feature slot).

    Request features are (slot, UserFeatures) pairs; user features are
    constant within a half-day slot, so identical keys always yield
    identical embeddings and caching only removes redundant work.
    """

    def __init__(self, model_config):
        self.model_config = model_config
        self._models: dict[int, UserModel] = {}
        self._memo: dict[tuple[int, int, int], np.ndarray] = {}
        self.computed = 0

    def model_for(self, snap: ModelSnapshot) -> UserModel:
        model = self._models.get(snap.version)
        if model is None:
            model = model_from_snapshot(self.model_config, snap)
            self._models[snap.version] = model
        return model

    def __call__(self, snap: ModelSnapshot, user_id: int, features) -> np.ndarray:
        slot, feats = features
        key = (snap.version, user_id, slot)
        hit = self._memo.get(key)
        if hit is None:
            hit = self.model_for(snap).user_embeddings(feats)
            self._memo[key] = hit
            self.computed += 1
        return hit


def train_upstream(world: LatentWorld, cfg: RunConfig, model_seed: int) -> dict[int, ModelSnapshot]:
    """Initial span plus daily recurring updates; snapshots keyed by
    trained-through day."""
    model_cfg = build_model_config(cfg)
    model = UserModel(model_cfg, seed=model_seed)
    store = SnapshotStore(retention=cfg.experiment.days_total + 1)
    trainer = Trainer(model, cfg.train, store)
    initial = cfg.train.initial_days
    trainer.train_initial(world, range(0, initial))
    for day in range(initial, cfg.experiment.days_total):
        trainer.recurring_update(world, day)
    return {store.get(v).trained_through_day: store.get(v) for v in store.versions()}


def _noise_column(seed: int, day: int, n: int) -> np.ndarray:
    key = np.array([np.uint64(seed), (np.uint64(606) << np.uint64(32)) | np.uint64(day)], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.normal(size=n).astype(np.float32)


def _feature_groups(k: int, dim: int, ad_inputs: int, dense_subset: int, with_embedding: bool):
    groups: dict[str, tuple[int, int]] = {}
    off = 0
    if with_embedding:
        for slot in range(k):
            groups[f"embedding_{slot}"] = (off, off + dim)
            off += dim
    groups["ad"] = (off, off + ad_inputs)
    off += ad_inputs
    groups["user_dense"] = (off, off + dense_subset)
    off += dense_subset
    groups["planted_noise"] = (off, off + 1)
    return groups, off + 1


@dataclass
class _ArmData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    provenance_counts: dict
    compute_stats: dict


def _serve_scheme_arm(
    arm: str,
    world: LatentWorld,
    cfg: RunConfig,
    by_day: dict[int, ModelSnapshot],
    computer: MemoizedComputer,
) -> _ArmData:
    exp = cfg.experiment
    t0, t1 = exp.downstream_train_days
    e0, e1 = exp.eval_days
    serve_days = list(range(t0, e1 + 1))
    k, dim = cfg.model.k_embeddings, cfg.model.dim
    emb_width = k * dim if arm != "baseline" else 0
    _, width = _feature_groups(k, dim, cfg.drift.ad_inputs, exp.dense_subset, arm != "baseline")

    service = None
    if arm != "baseline":
        mode = {
            "frozen": ServingMode.frozen(),
            "offline_batch": ServingMode.offline_batch(),
            "realtime": ServingMode.realtime(cfg.serving.budget_ms),
            "async": ServingMode.async_serving(),
        }[arm if not exp.smoke else "frozen"]
        store = FeatureStore(StoreConfig(k=k, dim=dim, history=cfg.store.history, pool_window=cfg.store.pool_window))
        service = EmbeddingService(
            compute_fn=computer,
            store=store,
            mode=mode,
            clock=SimClock(),
            pool_window=cfg.store.pool_window,
            queue_capacity=cfg.serving.queue_capacity,
            compute_delay=exp.async_delay_s if mode.kind == "async" else 0.0,
        )
        initial_day = cfg.train.initial_days - 1
        service.start(by_day[initial_day])

    train_x, train_y, eval_x, eval_y = [], [], [], []
    prov_counts: dict[str, int] = {}
    request_id = 0
    for day in serve_days:
        events = world.events_for_day(day)
        n = len(events)
        spacing = DAY_SECONDS / n
        noise = _noise_column(cfg.drift.seed, day, n)
        mode_kind = service.mode.kind if service is not None else "baseline"
        if service is not None and not exp.smoke:
            if mode_kind in ("realtime", "async"):
                target = by_day[day - 1]
                if target.version > service.current_version():
                    service.swap_snapshot(target)
            elif mode_kind == "offline_batch":
                dump_snap = by_day[max(cfg.train.initial_days - 1, day - exp.batch_model_lag)]
                yesterday = world.user_features(day - 1, half=1)   # end-of-day state
                slot = (day - 1) * 2 + 1
                population = {uid: (slot, feats) for uid, feats in enumerate(yesterday)}
                service.run_batch_job(dump_snap, population, day - 1)
        block = np.empty((n, width), dtype=np.float32)
        y_block = np.empty(n, dtype=np.float32)
        for i, ev in enumerate(events):
            off = 0
            if emb_width:
                request_id += 1
                resp = service.serve(
                    ServeRequest(
                        request_id=request_id,
                        user_id=ev.user_id,
                        features=(ev.slot, ev.features),
                        arrival_time=day * DAY_SECONDS + (i + 0.5) * spacing,
                    )
                )
                block[i, :emb_width] = resp.embedding.reshape(-1)
                off = emb_width
            block[i, off : off + cfg.drift.ad_inputs] = ev.ad
            off += cfg.drift.ad_inputs
            block[i, off : off + exp.dense_subset] = ev.features.dense[: exp.dense_subset]
            off += exp.dense_subset
            block[i, off] = noise[i]
            y_block[i] = ev.labels[0]
        if day <= t1:
            train_x.append(block)
            train_y.append(y_block)
        else:
            eval_x.append(block)
            eval_y.append(y_block)
    if service is not None:
        prov_counts = dict(service.metrics.provenance_counts)
        stats = service.metrics.snapshot()
        compute_stats = {
            key: stats[key]
            for key in ("compute_requested", "compute_coalesced", "compute_dropped", "compute_writes", "fallbacks")
        }
    else:
        compute_stats = {}
    return _ArmData(
        x_train=np.concatenate(train_x),
        y_train=np.concatenate(train_y),
        x_eval=np.concatenate(eval_x),
        y_eval=np.concatenate(eval_y),
        provenance_counts=prov_counts,
        compute_stats=compute_stats,
    )


def _fit_and_score(arm: str, data: _ArmData, cfg: RunConfig, seed: int):
    k, dim = cfg.model.k_embeddings, cfg.model.dim
    groups, width = _feature_groups(k, dim, cfg.drift.ad_inputs, cfg.experiment.dense_subset, arm != "baseline")
    model = DownstreamModel(width, groups, seed=2000 + seed, lr=cfg.experiment.downstream_lr)
    model.fit(data.x_train, data.y_train, epochs=cfg.experiment.downstream_epochs)
    train_ne = normalized_entropy(model.predict_proba(data.x_train), data.y_train)
    eval_ne = normalized_entropy(model.predict_proba(data.x_eval), data.y_eval)
    return model, train_ne, eval_ne


def _bayes_eval_ne(world: LatentWorld, days: range) -> float:
    probs, labels = [], []
    for day in days:
        for ev in world.events_for_day(day):
            probs.append(ev.gt_probs[0])
            labels.append(ev.labels[0])
    return normalized_entropy(np.asarray(probs), np.asarray(labels))


# ---------------------------------------------------------------------------
# scheme comparison


def run_scheme_comparison_seed(cfg: RunConfig, seed: int) -> dict:
    started = time.monotonic()
    drift = dataclasses.replace(cfg.drift, seed=cfg.drift.seed + seed)
    seeded = dataclasses.replace(cfg, drift=drift)
    world = LatentWorld(drift)
    by_day = train_upstream(world, seeded, model_seed=1000 + seed)
    computer = MemoizedComputer(build_model_config(seeded))
    e0, e1 = cfg.experiment.eval_days
    result: dict = {"arms": {}, "bayes_ne": _bayes_eval_ne(world, range(e0, e1 + 1))}
    baseline_eval = None
    fi_rows = None
    for arm in SCHEME_ARMS:
        data = _serve_scheme_arm(arm, world, seeded, by_day, computer)
        model, train_ne, eval_ne = _fit_and_score(arm, data, seeded, seed)
        entry = {
            "train_ne": train_ne,
            "eval_ne": eval_ne,
            "events_train": int(len(data.y_train)),
            "events_eval": int(len(data.y_eval)),
            "provenance_counts": data.provenance_counts,
            "compute_stats": data.compute_stats,
        }
        if arm == "baseline":
            baseline_eval = eval_ne
        entry["ne_diff_pct"] = (eval_ne - baseline_eval) / baseline_eval * 100.0
        result["arms"][arm] = entry
        if arm == "realtime":
            fi_rows = permutation_importance(
                model.predict_proba, data.x_eval, data.y_eval, model.groups, seed=3000 + seed
            )
        del data
    result["feature_importance"] = [[name, delta] for name, delta in fi_rows]
    result["elapsed_s"] = time.monotonic() - started
    return result


def _ordering_holds(arms: dict) -> bool:
    order = ["realtime", "async", "offline_batch", "frozen", "baseline"]
    nes = [arms[a]["eval_ne"] for a in order]
    return all(a <= b for a, b in zip(nes, nes[1:]))


def run_scheme_comparison(cfg: RunConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    cfg.validate()
    per_seed = {}
    for seed in cfg.seeds:
        per_seed[str(seed)] = run_scheme_comparison_seed(cfg, seed)
    orderings = {s: _ordering_holds(r["arms"]) for s, r in per_seed.items()}
    gap_ok = {}
    for s, r in per_seed.items():
        a = r["arms"]
        gap_async = abs(a["async"]["eval_ne"] - a["realtime"]["eval_ne"])
        gap_batch = abs(a["offline_batch"]["eval_ne"] - a["realtime"]["eval_ne"])
        gap_ok[s] = bool(gap_async < gap_batch)
    needed = _pass_threshold(len(cfg.seeds))
    mean_diffs = {
        arm: float(np.mean([per_seed[str(s)]["arms"][arm]["ne_diff_pct"] for s in cfg.seeds]))
        for arm in SCHEME_ARMS
    }
    aggregate = {
        "ordering_by_seed": orderings,
        "ordering_pass_count": sum(orderings.values()),
        "ordering_required": needed,
        "ordering_gate_passed": sum(orderings.values()) >= needed,
        "async_gap_smaller_by_seed": gap_ok,
        "async_gap_gate_passed": sum(gap_ok.values()) >= needed,
        "mean_ne_diff_pct": mean_diffs,
    }
    report = ExperimentReport(
        kind="scheme_comparison",
        fingerprint=cfg.fingerprint(),
        seeds=list(cfg.seeds),
        per_seed=per_seed,
        aggregate=aggregate,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "scheme_comparison.json")
        (out / "scheme_comparison.txt").write_text(report.render_text())
    return report


def _pass_threshold(n_seeds: int) -> int:
    return max(1, int(np.ceil(0.8 * n_seeds)))


# ---------------------------------------------------------------------------
# pooling ablation and shift study


def _batch_dumps(
    world: LatentWorld,
    cfg: RunConfig,
    by_day: dict[int, ModelSnapshot],
    computer: MemoizedComputer,
    days: list[int],
) -> dict[int, np.ndarray]:
    """Daily all-user embedding dumps in offline-batch style: for day d the
    dump holds tower_{v(d-1)}(features(d-1)) for every user, [U x K x D]."""
    dumps = {}
    for day in days:
        snap = by_day[day - 1]
        feats = world.user_features(day - 1, half=1)
        slot = (day - 1) * 2 + 1
        arr = np.empty((len(feats), cfg.model.k_embeddings, cfg.model.dim), dtype=np.float32)
        for uid, f in enumerate(feats):
            arr[uid] = computer(snap, uid, (slot, f))
        dumps[day] = arr
    return dumps


def run_pooling_ablation_seed(cfg: RunConfig, seed: int) -> dict:
    started = time.monotonic()
    exp = cfg.experiment
    drift = dataclasses.replace(cfg.drift, seed=cfg.drift.seed + seed)
    seeded = dataclasses.replace(cfg, drift=drift)
    world = LatentWorld(drift)
    by_day = train_upstream(world, seeded, model_seed=1000 + seed)
    if len(by_day) < 6:
        raise ValueError(f"pooling ablation needs >= 6 published snapshots, got {len(by_day)}")
    computer = MemoizedComputer(build_model_config(seeded))
    t0, t1 = exp.downstream_train_days
    e0, e1 = exp.eval_days
    serve_days = list(range(t0, e1 + 1))
    window = cfg.store.pool_window
    dump_days = list(range(t0 - (window - 1), e1 + 1))
    dumps = _batch_dumps(world, seeded, by_day, computer, dump_days)

    def pooled_embedding(day: int, uid: int, use_pooling: bool) -> np.ndarray:
        if not use_pooling:
            return dumps[day][uid]
        parts = [dumps[d][uid] for d in range(max(dump_days[0], day - window + 1), day + 1)]
        return np.mean(parts, axis=0)

    k, dim = cfg.model.k_embeddings, cfg.model.dim
    result: dict = {"arms": {}}
    baseline = {}
    for arm in ("baseline", "sum_raw", "sum_pooled"):
        with_emb = arm != "baseline"
        groups, width = _feature_groups(k, dim, drift.ad_inputs, exp.dense_subset, with_emb)
        train_x, train_y, eval_x, eval_y = [], [], [], []
        for day in serve_days:
            events = world.events_for_day(day)
            n = len(events)
            noise = _noise_column(drift.seed, day, n)
            block = np.empty((n, width), dtype=np.float32)
            y_block = np.empty(n, dtype=np.float32)
            emb_cache: dict[int, np.ndarray] = {}
            for i, ev in enumerate(events):
                off = 0
                if with_emb:
                    emb = emb_cache.get(ev.user_id)
                    if emb is None:
                        emb = pooled_embedding(day, ev.user_id, arm == "sum_pooled").reshape(-1)
                        emb_cache[ev.user_id] = emb
                    block[i, : k * dim] = emb
                    off = k * dim
                block[i, off : off + drift.ad_inputs] = ev.ad
                off += drift.ad_inputs
                block[i, off : off + exp.dense_subset] = ev.features.dense[: exp.dense_subset]
                off += exp.dense_subset
                block[i, off] = noise[i]
                y_block[i] = ev.labels[0]
            if day <= t1:
                train_x.append(block)
                train_y.append(y_block)
            else:
                eval_x.append(block)
                eval_y.append(y_block)
        data = _ArmData(
            np.concatenate(train_x), np.concatenate(train_y),
            np.concatenate(eval_x), np.concatenate(eval_y), {}, {},
        )
        _, train_ne, eval_ne = _fit_and_score("baseline" if not with_emb else arm, data, seeded, seed)
        entry = {"train_ne": train_ne, "eval_ne": eval_ne}
        if arm == "baseline":
            baseline = entry
        entry["train_gain_pct"] = (baseline["train_ne"] - train_ne) / baseline["train_ne"] * 100.0
        entry["eval_gain_pct"] = (baseline["eval_ne"] - eval_ne) / baseline["eval_ne"] * 100.0
        result["arms"][arm] = entry

    sample = min(len(dumps[dump_days[0]]), 400)
    sequences = {
        uid: np.stack([dumps[d][uid] for d in dump_days])
        for uid in range(sample)
    }
    raw = embedding_shift_report(sequences)
    pooled = embedding_shift_report(sequences, pooling_window=window)
    result["shift"] = {
        "raw": [dataclasses.asdict(s) for s in raw],
        "pooled": [dataclasses.asdict(s) for s in pooled],
    }
    result["elapsed_s"] = time.monotonic() - started
    return result


def run_pooling_ablation(cfg: RunConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    cfg.validate()
    per_seed = {}
    for seed in cfg.seeds:
        per_seed[str(seed)] = run_pooling_ablation_seed(cfg, seed)
    needed = _pass_threshold(len(cfg.seeds))
    ap_better, raw_degrades, both_beat = {}, {}, {}
    shift_ok = {}
    for s, r in per_seed.items():
        arms = r["arms"]
        ap_better[s] = bool(arms["sum_pooled"]["eval_gain_pct"] > arms["sum_raw"]["eval_gain_pct"])
        raw_degrades[s] = bool(arms["sum_raw"]["eval_gain_pct"] < arms["sum_raw"]["train_gain_pct"])
        both_beat[s] = bool(arms["sum_raw"]["train_gain_pct"] > 0 and arms["sum_pooled"]["train_gain_pct"] > 0)
        ok = True
        for raw_slot, pooled_slot in zip(r["shift"]["raw"], r["shift"]["pooled"]):
            ok = ok and pooled_slot["mean_cosine"] > raw_slot["mean_cosine"]
            ok = ok and pooled_slot["mean_l2_change_pct"] < raw_slot["mean_l2_change_pct"]
        shift_ok[s] = ok
    aggregate = {
        "ap_eval_gain_beats_raw_by_seed": ap_better,
        "ap_gate_passed": sum(ap_better.values()) >= needed,
        "raw_eval_below_train_by_seed": raw_degrades,
        "raw_degradation_gate_passed": sum(raw_degrades.values()) >= needed,
        "both_arms_beat_baseline_train_by_seed": both_beat,
        "shift_direction_by_seed": shift_ok,
        "shift_direction_all_seeds": all(shift_ok.values()),
    }
    report = ExperimentReport(
        kind="pooling_ablation",
        fingerprint=cfg.fingerprint(),
        seeds=list(cfg.seeds),
        per_seed=per_seed,
        aggregate=aggregate,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "pooling_ablation.json")
        (out / "pooling_ablation.txt").write_text(report.render_text())
    return report
