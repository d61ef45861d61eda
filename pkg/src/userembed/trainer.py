"""Initial plus daily recurring training with versioned snapshot publication."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .evaluation import normalized_entropy
from .model import UserModel, multi_task_loss
from .snapshot import ModelSnapshot, load_snapshot, save_snapshot, take_snapshot
from .tensor import Tensor, stable_sigmoid

__all__ = [
    "TrainConfig",
    "StalenessError",
    "SnapshotStore",
    "Trainer",
    "Adam",
    "Sgd",
]


class StalenessError(RuntimeError):
    """Recurring update asked to train a day that is not the next one."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    initial_days: int = 4
    cadence: int = 1                      # days folded into one published snapshot
    task_weights: tuple[float, ...] = (1.0, 0.3)
    seed: int = 0
    max_events_per_day: int | None = None  # deterministic stride cap on the day's pass
    recurring_lr_scale: float = 0.3        # incremental updates step gentler than initial training

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.initial_days < 1:
            raise ValueError("initial span must cover at least one day")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if any(w <= 0 for w in self.task_weights):
            raise ValueError("task weights must be positive")
        if self.recurring_lr_scale <= 0:
            raise ValueError("recurring_lr_scale must be positive")


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        scale = self.lr / bias1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= scale * m / (np.sqrt(v / bias2) + self.eps)


class SnapshotStore:
    """Ordered published snapshots with bounded retention and a manifest.

    Versions are strictly increasing and gap-free; the latest snapshot is
    never evicted. With a directory, each snapshot is persisted and listed in
    manifest.json as (version, day, path, sha256).
    """

    def __init__(self, directory: str | Path | None = None, retention: int = 8):
        if retention < 1:
            raise ValueError("retention must keep at least one snapshot")
        self.directory = Path(directory) if directory is not None else None
        self.retention = retention
        self._snaps: dict[int, ModelSnapshot] = {}
        self._manifest: list[dict] = []
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def publish(self, snap: ModelSnapshot) -> None:
        versions = self.versions()
        expected = versions[-1] + 1 if versions else 1
        if snap.version != expected:
            raise ValueError(f"snapshot version {snap.version} breaks the sequence (expected {expected})")
        if versions and snap.trained_through_day <= self._snaps[versions[-1]].trained_through_day:
            raise ValueError("trained_through_day must advance with each version")
        self._snaps[snap.version] = snap
        if self.directory is not None:
            path = self.directory / f"snapshot_v{snap.version:05d}.bin"
            digest = save_snapshot(snap, path)
            self._manifest.append(
                {
                    "version": snap.version,
                    "trained_through_day": snap.trained_through_day,
                    "path": path.name,
                    "sha256": digest,
                }
            )
            self._write_manifest()
        self._evict()

    def _evict(self) -> None:
        versions = self.versions()
        while len(versions) > self.retention:
            victim = versions.pop(0)
            del self._snaps[victim]
            if self.directory is not None:
                (self.directory / f"snapshot_v{victim:05d}.bin").unlink(missing_ok=True)

    def _write_manifest(self) -> None:
        (self.directory / "manifest.json").write_text(
            json.dumps({"snapshots": self._manifest}, indent=2) + "\n"
        )

    def versions(self) -> list[int]:
        return sorted(self._snaps)

    def latest(self) -> ModelSnapshot:
        versions = self.versions()
        if not versions:
            raise LookupError("no snapshots published yet")
        return self._snaps[versions[-1]]

    def get(self, version: int) -> ModelSnapshot:
        if version not in self._snaps:
            raise LookupError(f"snapshot version {version} not retained")
        return self._snaps[version]

    @classmethod
    def open(cls, directory: str | Path, retention: int = 8) -> "SnapshotStore":
        store = cls(directory=None, retention=retention)
        store.directory = Path(directory)
        manifest = json.loads((store.directory / "manifest.json").read_text())
        for entry in manifest["snapshots"]:
            path = store.directory / entry["path"]
            if path.exists():
                store._snaps[entry["version"]] = load_snapshot(path)
            store._manifest.append(entry)
        return store


def _stride_cap(events: Sequence, cap: int | None) -> Sequence:
    if cap is None or len(events) <= cap:
        return events
    idx = np.linspace(0, len(events) - 1, cap).astype(int)
    return [events[i] for i in idx]


class Trainer:
    """Single-writer optimizer over one model; publishes immutable snapshots.

    The optimizer's moment state lives with the trainer for the duration of a
    run; resuming from a stored snapshot in a fresh process restarts the
    moments at zero.
    """

    def __init__(self, model: UserModel, config: TrainConfig, store: SnapshotStore):
        config.validate()
        if len(config.task_weights) != model.config.tasks:
            raise ValueError(
                f"{len(config.task_weights)} task weights for {model.config.tasks} tasks"
            )
        self.model = model
        self.config = config
        self.store = store
        self._tw = Tensor(np.asarray([config.task_weights], dtype=np.float32))
        if config.optimizer == "adam":
            self._opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        else:
            self._opt = Sgd(model.params, config.learning_rate)
        self.day_losses: dict[int, float] = {}

    # -- core passes

    def _run_day(self, events: Sequence) -> float:
        events = _stride_cap(events, self.config.max_events_per_day)
        total = 0.0
        seen = 0
        bs = self.config.batch_size
        params = self.model.params.values()
        for lo in range(0, len(events), bs):
            batch = events[lo : lo + bs]
            T.tape_clear()
            T.zero_grads(params)
            feats = [ev.features for ev in batch]
            ads = np.stack([ev.ad for ev in batch])
            labels = Tensor(np.asarray([ev.labels for ev in batch], dtype=np.float32))
            loss = multi_task_loss(self.model.batch_logits(feats, ads), labels, self._tw)
            T.backward(loss)
            self._opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        T.tape_clear()
        return total / max(seen, 1)

    def _publish(self, day: int) -> ModelSnapshot:
        versions = self.store.versions()
        version = versions[-1] + 1 if versions else 1
        snap = take_snapshot(self.model, version, day)
        self.store.publish(snap)
        return snap

    # -- public operations

    def train_initial(self, stream, days: range) -> ModelSnapshot:
        """One pass in event order over the span; publishes version 1."""
        if self.store.versions():
            raise StalenessError("store already holds snapshots; use recurring_update")
        if len(days) == 0:
            raise ValueError("initial training span is empty")
        saw_events = False
        for day in days:
            events = stream.events_for_day(day)
            if events:
                saw_events = True
                self.day_losses[day] = self._run_day(events)
        if not saw_events:
            raise ValueError("initial training stream is empty")
        return self._publish(days[-1])

    def recurring_update(self, stream, day: int) -> ModelSnapshot:
        """Continue from the latest snapshot over the next day's events only.

        With cadence c, one call folds days (t+1 .. t+c) into a single
        published snapshot and `day` must equal t+c.
        """
        latest = self.store.latest()
        expected = latest.trained_through_day + self.config.cadence
        if day != expected:
            raise StalenessError(
                f"recurring update for day {day}, but the next trainable day is {expected}"
            )
        base_lr = self._opt.lr
        self._opt.lr = base_lr * self.config.recurring_lr_scale
        try:
            for d in range(latest.trained_through_day + 1, day + 1):
                self.day_losses[d] = self._run_day(stream.events_for_day(d))
        finally:
            self._opt.lr = base_lr
        return self._publish(day)

    # -- evaluation

    def evaluate(self, snapshot: ModelSnapshot, stream, days: Iterable[int]) -> dict[int, float]:
        """Forward all events in the span; per-task normalized entropy."""
        return evaluate_snapshot(self.model.config, snapshot, stream, days)


def predict_events(config, snapshot: ModelSnapshot, events: Sequence) -> np.ndarray:
    """Per-task click probabilities [N x T] for a snapshot over events."""
    from .snapshot import model_from_snapshot

    model = model_from_snapshot(config, snapshot)
    probs = []
    with T.no_grad():
        for ev in events:
            logits = model.mix_tower_forward(model.tower_forward(ev.features), ev.ad)
            probs.append(stable_sigmoid(logits.data[0]))
    return np.asarray(probs)


def evaluate_snapshot(config, snapshot: ModelSnapshot, stream, days: Iterable[int]) -> dict[int, float]:
    days = list(days)
    if not days:
        raise ValueError("evaluation span is empty")
    all_events = []
    for day in days:
        all_events.extend(stream.events_for_day(day))
    if not all_events:
        raise ValueError("evaluation span has no events")
    probs = predict_events(config, snapshot, all_events)
    labels = np.asarray([ev.labels for ev in all_events], dtype=np.float64)
    return {
        task: normalized_entropy(probs[:, task], labels[:, task])
        for task in range(labels.shape[1])
    }
