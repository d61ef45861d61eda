"""Run configuration: one strict YAML file drives every command.

Unknown keys are rejected. The fingerprint is the sha256 of the
canonicalized config and is embedded in every output artifact; reports
refuse to merge arms whose fingerprints differ.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .fstore import StoreConfig
from .model import ExtractorSpec, LayerSpec, ModelConfig, TowerConfig, default_model_config
from .synth import DriftConfig, feature_names
from .trainer import TrainConfig

__all__ = [
    "ConfigFileError",
    "ModelSection",
    "ServingSection",
    "ExperimentSection",
    "RunConfig",
    "load_run_config",
    "default_run_config",
    "build_model_config",
    "write_example_config",
]


class ConfigFileError(ValueError):
    """Config file is malformed, has unknown keys, or fails validation."""


@dataclass(frozen=True)
class ModelSection:
    dim: int = 16
    k_embeddings: int = 2
    n_dense_tokens: int = 8
    sparse_buckets: int = 1024
    mix_hidden: tuple[int, ...] = (32,)
    ad_proj: int = 8


@dataclass(frozen=True)
class ServingSection:
    mode: str = "async"
    budget_ms: float = 30.0
    queue_capacity: int = 1024
    workers: int = 1
    compute_delay_ms: float = 0.0
    port: int = 7461


@dataclass(frozen=True)
class ExperimentSection:
    kind: str = "scheme_comparison"     # or "pooling_ablation"
    days_total: int = 20
    downstream_train_days: tuple[int, int] = (6, 15)
    eval_days: tuple[int, int] = (16, 19)
    downstream_epochs: int = 3
    downstream_lr: float = 0.03
    dense_subset: int = 4
    async_delay_s: float = 30.0         # simulated compute latency for the async arm
    batch_model_lag: int = 2            # nightly dump uses the day-(d-lag) snapshot
    smoke: bool = False                 # every arm serves the frozen snapshot

    def validate(self, initial_days: int) -> None:
        if self.kind not in ("scheme_comparison", "pooling_ablation"):
            raise ConfigFileError(f"unknown experiment kind {self.kind!r}")
        t0, t1 = self.downstream_train_days
        e0, e1 = self.eval_days
        if not (initial_days <= t0 <= t1 < e0 <= e1 < self.days_total):
            raise ConfigFileError(
                "day spans must satisfy initial <= train <= eval < days_total "
                f"(got initial={initial_days}, train={self.downstream_train_days}, "
                f"eval={self.eval_days}, total={self.days_total})"
            )
        if self.batch_model_lag < 1:
            raise ConfigFileError("batch_model_lag must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/default"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    drift: DriftConfig = field(default_factory=DriftConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_events_per_day=6000))
    store: StoreConfig = field(default_factory=lambda: StoreConfig(k=2, dim=16))
    serving: ServingSection = field(default_factory=ServingSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigFileError("need at least one seed")
        self.drift.validate()
        self.train.validate()
        self.store.validate()
        self.experiment.validate(self.train.initial_days)
        if self.store.k != self.model.k_embeddings or self.store.dim != self.model.dim:
            raise ConfigFileError(
                f"store (k={self.store.k}, dim={self.store.dim}) must match "
                f"model (k={self.model.k_embeddings}, dim={self.model.dim})"
            )

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True, default=list).encode()
        ).hexdigest()


def build_model_config(cfg: RunConfig) -> ModelConfig:
    return default_model_config(
        feature_names(),
        dense_inputs=cfg.drift.dense_inputs,
        ad_inputs=cfg.drift.ad_inputs,
        dim=cfg.model.dim,
        k_embeddings=cfg.model.k_embeddings,
        n_dense_tokens=cfg.model.n_dense_tokens,
        tasks=cfg.drift.tasks,
        sparse_buckets=cfg.model.sparse_buckets,
    )


_TUPLE_FIELDS = {"seeds", "base_rates", "task_weights", "mix_hidden", "downstream_train_days", "eval_days"}


def _build_dataclass(cls, mapping, path: str):
    if not isinstance(mapping, dict):
        raise ConfigFileError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(fields)
    if unknown:
        raise ConfigFileError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in mapping.items():
        f = fields[name]
        sub = f.type if isinstance(f.type, type) else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build_dataclass(sub, value, f"{path}.{name}")
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigFileError(f"{path}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc


_SECTIONS = {
    "drift": DriftConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "store": StoreConfig,
    "serving": ServingSection,
    "experiment": ExperimentSection,
}


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    unknown = set(raw) - (set(_SECTIONS) | {"out_dir", "seeds"})
    if unknown:
        raise ConfigFileError(f"{path}: unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw["out_dir"])
    if "seeds" in raw:
        kwargs["seeds"] = tuple(raw["seeds"])
    for section, cls in _SECTIONS.items():
        if section in raw:
            kwargs[section] = _build_dataclass(cls, raw[section], section)
    cfg = RunConfig(**kwargs)
    try:
        cfg.validate()
    except ConfigFileError:
        raise
    except ValueError as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    return cfg


def default_run_config() -> RunConfig:
    cfg = RunConfig()
    cfg.validate()
    return cfg


_EXAMPLE = """\
# Full run configuration. Every key shown here is at its default; unknown
# keys are rejected. The sha256 fingerprint of this file's parsed content is
# stamped into every output artifact.

out_dir: runs/default
seeds: [0, 1, 2, 3, 4]

drift:                       # synthetic stream
  num_users: 3000
  num_ads: 300
  events_per_day: 50000
  id_churn: 0.1              # fraction of sparse-id symbols remapped per day
  semantic_drift: 0.1        # per-day rotation (radians) of user latents
  label_noise: 0.03          # mixture weight toward the base rate
  base_rates: [0.12, 0.04]   # per-task positive rates (task 0 = click)
  user_gain: 7.0
  ad_gain: 2.0
  cross_gain: 3.0
  dense_inputs: 32
  ad_inputs: 8
  dense_noise: 0.2
  user_skew: 1.05
  seed: 0                    # combined with the per-run seed list

model:                       # upstream tower dimensions
  dim: 16
  k_embeddings: 2
  n_dense_tokens: 8
  sparse_buckets: 1024
  mix_hidden: [32]
  ad_proj: 8

train:
  learning_rate: 0.003
  optimizer: adam            # adam | sgd
  beta1: 0.9
  beta2: 0.999
  adam_eps: 1.0e-08
  batch_size: 64
  initial_days: 4
  cadence: 1                 # days folded into one published snapshot
  task_weights: [1.0, 0.3]
  seed: 0
  max_events_per_day: 6000   # deterministic stride cap per training day
  recurring_lr_scale: 0.3

store:
  k: 2
  dim: 16
  history: 3                 # versions retained per user
  pool_window: 3             # current + 2 cached versions

serving:
  mode: async                # frozen | offline_batch | realtime | async
  budget_ms: 30.0
  queue_capacity: 1024
  workers: 1
  compute_delay_ms: 0.0
  port: 7461

experiment:
  kind: scheme_comparison    # scheme_comparison | pooling_ablation
  days_total: 20
  downstream_train_days: [6, 15]
  eval_days: [16, 19]
  downstream_epochs: 3
  downstream_lr: 0.03
  dense_subset: 4            # downstream's restricted dense slice
  async_delay_s: 30.0        # simulated async compute latency
  batch_model_lag: 2         # nightly dump uses the day-(d-lag) snapshot
  smoke: false               # serve the frozen snapshot in every arm
"""


def write_example_config(path: str | Path) -> None:
    Path(path).write_text(_EXAMPLE)
