"""Synthetic impression stream with controlled id churn and semantic drift.

Each user's latent vector rotates `semantic_drift` radians per day inside a
fixed, per-user random 2-plane (constant norm), so drift compounds
coherently: after t days the user has moved t*drift radians from where a
stale model last saw them. Sparse ids are symbols for latent-cluster
membership (plus per-user identity ids); an `id_churn` fraction of symbols
is remapped to fresh ids every day, so a stale model faces both never-seen
ids and rotated semantics. Labels are sampled from an exact, exposed
probability, which makes the Bayes-optimal NE floor computable.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import UserFeatures
from .tensor import stable_sigmoid

__all__ = [
    "DriftConfig",
    "ImpressionEvent",
    "LatentWorld",
    "DayFileError",
    "write_day_file",
    "read_day_file",
    "DayFileStream",
]

LATENT_DIM = 16
NUM_CLUSTERS = 20
HALVES_PER_DAY = 2          # features refresh twice per simulated day
CLUSTER_FEATURES = 16
TOP3_FEATURES = 2          # of the cluster features, how many emit top-3 id lists
IDENTITY_FEATURES = 8


@dataclass(frozen=True)
class DriftConfig:
    num_users: int = 3000
    num_ads: int = 300
    events_per_day: int = 50_000
    id_churn: float = 0.1          # fraction of id symbols remapped per day
    semantic_drift: float = 0.1    # per-day rotation angle (radians) of user latents
    label_noise: float = 0.03      # mixture weight toward the base rate
    base_rates: tuple[float, ...] = (0.12, 0.04)
    user_gain: float = 7.0         # weight of the user main effect <u, w_user>
    ad_gain: float = 2.0           # weight of the ad main effect <a, w_ad>
    cross_gain: float = 3.0        # weight of the interaction term <u, a>
    dense_inputs: int = 32
    ad_inputs: int = 8
    dense_noise: float = 0.2
    user_skew: float = 1.05        # event user sampling ~ 1/(rank+1)^skew; 0 = uniform
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.id_churn <= 1.0):
            raise ValueError("id_churn must be in [0, 1]")
        if self.semantic_drift < 0:
            raise ValueError("semantic_drift must be >= 0")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ValueError("label_noise must be in [0, 1]")
        if any(not (0.0 < r < 1.0) for r in self.base_rates):
            raise ValueError("base rates must be in (0, 1)")
        if min(self.num_users, self.num_ads, self.events_per_day) < 1:
            raise ValueError("population and day length must be positive")

    @property
    def tasks(self) -> int:
        return len(self.base_rates)


def feature_names(config: DriftConfig | None = None) -> tuple[str, ...]:
    names = [f"interest_{i:02d}" for i in range(CLUSTER_FEATURES)]
    names += [f"account_{i:02d}" for i in range(IDENTITY_FEATURES)]
    return tuple(names)


@dataclass(frozen=True, eq=False)
class ImpressionEvent:
    day: int
    slot: int                  # feature-time index: day * HALVES_PER_DAY + half
    user_id: int
    features: UserFeatures
    ad: np.ndarray
    labels: tuple[int, ...]
    gt_probs: tuple[float, ...]


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def stable_id(feature_idx: int, entity: np.ndarray | int, generation: np.ndarray | int) -> np.ndarray:
    """Deterministic 64-bit id symbol for (feature, entity, generation)."""
    with np.errstate(over="ignore"):
        base = (
            np.uint64(feature_idx + 1) * np.uint64(0x9E3779B97F4A7C15)
            + np.asarray(entity, dtype=np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            + np.asarray(generation, dtype=np.uint64) * np.uint64(0x165667B19E3779F9)
        )
    return _mix64(base)


def _rng(seed: int, tag: int, day: int) -> np.random.Generator:
    # collision-free stream keying: (seed, tag||day) as two Philox key words
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), (np.uint64(tag) << np.uint64(32)) | np.uint64(day)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


class LatentWorld:
    """Deterministic world state; everything derives from (config, seed)."""

    def __init__(self, config: DriftConfig):
        config.validate()
        self.config = config
        root = np.random.Generator(np.random.Philox(key=config.seed))
        self.centroids = self._unit(root.normal(size=(NUM_CLUSTERS, LATENT_DIM)))
        base = self.centroids[root.integers(0, NUM_CLUSTERS, size=config.num_users)]
        base = base + 0.45 * root.normal(size=(config.num_users, LATENT_DIM))
        self.user_base = self._unit(base)
        self.ad_latents = self._unit(root.normal(size=(config.num_ads, LATENT_DIM)))
        self.w_user = self._unit(root.normal(size=LATENT_DIM))
        self.w_ad = self._unit(root.normal(size=LATENT_DIM))
        self.dense_proj = root.normal(size=(LATENT_DIM, config.dense_inputs)) / np.sqrt(LATENT_DIM)
        self.ad_proj = root.normal(size=(LATENT_DIM, config.ad_inputs)) / np.sqrt(LATENT_DIM)
        self.feature_proj = root.normal(size=(CLUSTER_FEATURES, LATENT_DIM, LATENT_DIM)) / np.sqrt(LATENT_DIM)
        self.ad_vectors = (self.ad_latents @ self.ad_proj).astype(np.float32)
        probs = 1.0 / np.arange(1, config.num_users + 1, dtype=np.float64) ** config.user_skew
        self.user_probs = probs / probs.sum()
        # fixed per-user tangent direction: the drift plane is span(u0, tangent)
        g = root.normal(size=self.user_base.shape)
        g -= (g * self.user_base).sum(axis=1, keepdims=True) * self.user_base
        self.user_tangent = self._unit(g)
        self.intercepts = self._calibrate(root)
        self.names = feature_names(config)
        # lazily grown caches
        self._latent_cache: dict[int, np.ndarray] = {}
        self._cluster_gen: list[np.ndarray] = [np.zeros((CLUSTER_FEATURES, NUM_CLUSTERS), dtype=np.uint32)]
        self._identity_gen: list[np.ndarray] = [np.zeros((IDENTITY_FEATURES, config.num_users), dtype=np.uint32)]
        self._day_features: dict[tuple[int, int], list[UserFeatures]] = {}
        self._day_events: dict[int, list[ImpressionEvent]] = {}

    @staticmethod
    def _unit(x: np.ndarray) -> np.ndarray:
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def _signal(self, u: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Intercept-free logit: user main effect + ad main effect + interaction."""
        cfg = self.config
        return (
            cfg.user_gain * (u @ self.w_user)
            + cfg.ad_gain * (a @ self.w_ad)
            + cfg.cross_gain * (u * a).sum(axis=-1)
        )

    def _calibrate(self, rng: np.random.Generator) -> np.ndarray:
        """Intercepts such that the day-0 mean probability hits each base rate."""
        pairs_u = np.repeat(self.user_base, 7, axis=0)
        pairs_a = self.ad_latents[rng.integers(0, self.config.num_ads, size=len(pairs_u))]
        dots = self._signal(pairs_u, pairs_a)
        out = []
        for rate in self.config.base_rates:
            lo, hi = -20.0, 20.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if stable_sigmoid(dots + mid).mean() > rate:
                    hi = mid
                else:
                    lo = mid
            out.append(0.5 * (lo + hi))
        return np.asarray(out)

    # -- per-day evolution

    def latents_at(self, t_days: float) -> np.ndarray:
        """User latents at a (possibly fractional) day; coherent rotation."""
        if self.config.semantic_drift == 0.0:
            return self.user_base
        key = round(float(t_days) * 4096)
        hit = self._latent_cache.get(key)
        if hit is None:
            theta = self.config.semantic_drift * t_days
            hit = self._unit(np.cos(theta) * self.user_base + np.sin(theta) * self.user_tangent)
            self._latent_cache[key] = hit
        return hit

    def latents(self, day: int) -> np.ndarray:
        return self.latents_at(float(day))

    @staticmethod
    def slot_time(day: int, half: int) -> float:
        """Feature snapshot time for a half-day slot, in days."""
        return day + 0.25 + 0.5 * half

    def _gens(self, day: int) -> tuple[np.ndarray, np.ndarray]:
        while len(self._cluster_gen) <= day:
            d = len(self._cluster_gen)
            rng = _rng(self.config.seed, 202, d)
            bump_c = rng.random(size=self._cluster_gen[-1].shape) < self.config.id_churn
            self._cluster_gen.append(self._cluster_gen[-1] + bump_c.astype(np.uint32))
            bump_i = rng.random(size=self._identity_gen[-1].shape) < self.config.id_churn
            self._identity_gen.append(self._identity_gen[-1] + bump_i.astype(np.uint32))
        return self._cluster_gen[day], self._identity_gen[day]

    # -- feature assembly

    def user_features(self, day: int, half: int = 0) -> list[UserFeatures]:
        """One shared UserFeatures object per user for the half-day slot.

        Cluster memberships and dense features reflect the latent state at
        `slot_time(day, half)`; id-symbol churn stays a day-boundary event.
        """
        key = (day, half)
        if key in self._day_features:
            return self._day_features[key]
        cfg = self.config
        u = self.latents_at(self.slot_time(day, half))
        cgen, igen = self._gens(day)
        rng = _rng(cfg.seed, 303, day * HALVES_PER_DAY + half)
        dense = (u @ self.dense_proj + cfg.dense_noise * rng.normal(size=(cfg.num_users, cfg.dense_inputs))).astype(np.float32)

        per_feature_ids: list[np.ndarray] = []
        top3_sets: list[np.ndarray] = []
        for f in range(CLUSTER_FEATURES):
            scores = (u @ self.feature_proj[f]) @ self.centroids.T   # [U x C]
            if f < TOP3_FEATURES:
                top = np.argsort(-scores, axis=1)[:, :3]             # [U x 3]
                gens = cgen[f][top]
                ids = stable_id(f, top, gens)
                top3_sets.append(ids)
                per_feature_ids.append(None)
            else:
                best = scores.argmax(axis=1)                          # [U]
                ids = stable_id(f, best, cgen[f][best])
                per_feature_ids.append(ids)
                top3_sets.append(None)
        identity_ids = [
            stable_id(CLUSTER_FEATURES + f, np.arange(cfg.num_users), igen[f])
            for f in range(IDENTITY_FEATURES)
        ]

        out = []
        names = self.names
        for uid in range(cfg.num_users):
            sparse = []
            for f in range(CLUSTER_FEATURES):
                if f < TOP3_FEATURES:
                    sparse.append((names[f], tuple(int(x) for x in top3_sets[f][uid])))
                else:
                    sparse.append((names[f], (int(per_feature_ids[f][uid]),)))
            for f in range(IDENTITY_FEATURES):
                sparse.append((names[CLUSTER_FEATURES + f], (int(identity_ids[f][uid]),)))
            out.append(UserFeatures(sparse=tuple(sparse), dense=dense[uid]))
        self._day_features[key] = out
        return out

    # -- labels

    def ground_truth_probability(self, user_id: int, ad_id: int, day: float, task: int) -> float:
        """The exact probability the label sampler uses.

        `day` may be fractional; events in the first half of day d use
        slot_time(d, 0) = d + 0.25 and the second half d + 0.75.
        """
        cfg = self.config
        u = self.latents_at(float(day))[user_id]
        a = self.ad_latents[ad_id]
        p = float(stable_sigmoid(np.asarray(self._signal(u, a) + self.intercepts[task]).reshape(1))[0])
        return (1.0 - cfg.label_noise) * p + cfg.label_noise * cfg.base_rates[task]

    def events_for_day(self, day: int) -> list[ImpressionEvent]:
        if day < 0:
            raise ValueError("day must be >= 0")
        if day in self._day_events:
            return self._day_events[day]
        cfg = self.config
        rng = _rng(cfg.seed, 404, day)
        n = cfg.events_per_day
        users = rng.choice(cfg.num_users, size=n, p=self.user_probs)
        ads = rng.integers(0, cfg.num_ads, size=n)
        halves = (np.arange(n) >= (n + 1) // 2).astype(np.int64)
        dots = np.empty(n)
        for half in (0, 1):
            mask = halves == half
            u = self.latents_at(self.slot_time(day, half))
            dots[mask] = self._signal(u[users[mask]], self.ad_latents[ads[mask]])
        feats = [self.user_features(day, half) for half in (0, 1)]
        probs = np.empty((n, cfg.tasks))
        for t in range(cfg.tasks):
            pure = stable_sigmoid(dots + self.intercepts[t])
            probs[:, t] = (1.0 - cfg.label_noise) * pure + cfg.label_noise * cfg.base_rates[t]
        draws = rng.random(size=probs.shape)
        labels = (draws < probs).astype(np.int8)
        events = []
        base_slot = day * HALVES_PER_DAY
        for i in range(n):
            uid = int(users[i])
            half = int(halves[i])
            events.append(
                ImpressionEvent(
                    day=day,
                    slot=base_slot + half,
                    user_id=uid,
                    features=feats[half][uid],
                    ad=self.ad_vectors[ads[i]],
                    labels=tuple(int(x) for x in labels[i]),
                    gt_probs=tuple(float(x) for x in probs[i]),
                )
            )
        self._day_events[day] = events
        return events

    def release_day(self, day: int) -> None:
        """Drop cached events/features for a consumed day (memory control)."""
        self._day_events.pop(day, None)
        for half in (0, 1):
            self._day_features.pop((day, half), None)


# ---------------------------------------------------------------------------
# day files

_DAY_MAGIC = b"UEDAY1\n\x00"
_DAY_FORMAT = 1


class DayFileError(ValueError):
    """Day file is malformed or fails its checksum."""


def write_day_file(events: Sequence[ImpressionEvent], path: str | Path, fingerprint: str = "") -> str:
    """Length-prefixed binary event records with a sha256 trailer.

    Returns the file's sha256 hex digest. Identical inputs produce identical
    bytes.
    """
    if not events:
        day = -1
        names: tuple[str, ...] = ()
        dense_len = 0
        ad_len = 0
        n_tasks = 0
    else:
        first = events[0]
        day = first.day
        names = tuple(n for n, _ in first.features.sparse)
        dense_len = len(first.features.dense)
        ad_len = len(first.ad)
        n_tasks = len(first.labels)
    head = [
        _DAY_MAGIC,
        struct.pack("<HiIHHHH", _DAY_FORMAT, day, len(events), n_tasks, dense_len, ad_len, len(names)),
    ]
    fp = fingerprint.encode()
    head.append(struct.pack("<H", len(fp)))
    head.append(fp)
    for n in names:
        raw = n.encode()
        head.append(struct.pack("<H", len(raw)))
        head.append(raw)
    body = [b"".join(head)]
    for ev in events:
        rec = [struct.pack("<QI", ev.user_id, ev.slot)]
        for name, ids in ev.features.sparse:
            rec.append(struct.pack("<H", len(ids)))
            rec.append(np.asarray(ids, dtype="<u8").tobytes())
        rec.append(np.ascontiguousarray(ev.features.dense, dtype="<f4").tobytes())
        rec.append(np.ascontiguousarray(ev.ad, dtype="<f4").tobytes())
        rec.append(bytes(ev.labels))
        rec.append(np.asarray(ev.gt_probs, dtype="<f4").tobytes())
        raw = b"".join(rec)
        body.append(struct.pack("<I", len(raw)))
        body.append(raw)
    blob = b"".join(body)
    data = blob + hashlib.sha256(blob).digest()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_day_file(path: str | Path) -> list[ImpressionEvent]:
    data = Path(path).read_bytes()
    if len(data) < len(_DAY_MAGIC) + 18 + 32:
        raise DayFileError(f"{path}: truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DayFileError(f"{path}: checksum mismatch")
    if body[: len(_DAY_MAGIC)] != _DAY_MAGIC:
        raise DayFileError(f"{path}: bad magic")
    off = len(_DAY_MAGIC)
    fmt, day, count, n_tasks, dense_len, ad_len, n_features = struct.unpack_from("<HiIHHHH", body, off)
    off += struct.calcsize("<HiIHHHH")
    if fmt != _DAY_FORMAT:
        raise DayFileError(f"{path}: unsupported format {fmt}")
    (fplen,) = struct.unpack_from("<H", body, off)
    off += 2 + fplen
    names = []
    for _ in range(n_features):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        names.append(body[off : off + nlen].decode())
        off += nlen
    events = []
    shared: dict[tuple[int, int], UserFeatures] = {}
    for _ in range(count):
        (rlen,) = struct.unpack_from("<I", body, off)
        off += 4
        rec = body[off : off + rlen]
        off += rlen
        pos = 0
        user_id, slot = struct.unpack_from("<QI", rec, pos)
        pos += 12
        sparse = []
        for name in names:
            (nids,) = struct.unpack_from("<H", rec, pos)
            pos += 2
            ids = np.frombuffer(rec, dtype="<u8", count=nids, offset=pos)
            pos += 8 * nids
            sparse.append((name, tuple(int(x) for x in ids)))
        dense = np.frombuffer(rec, dtype="<f4", count=dense_len, offset=pos).astype(np.float32)
        pos += 4 * dense_len
        ad = np.frombuffer(rec, dtype="<f4", count=ad_len, offset=pos).astype(np.float32)
        pos += 4 * ad_len
        labels = tuple(int(b) for b in rec[pos : pos + n_tasks])
        pos += n_tasks
        gt = np.frombuffer(rec, dtype="<f4", count=n_tasks, offset=pos)
        pos += 4 * n_tasks
        if pos != rlen:
            raise DayFileError(f"{path}: record length mismatch")
        feats = shared.get((user_id, slot))
        if feats is None:
            feats = UserFeatures(sparse=tuple(sparse), dense=dense)
            shared[(user_id, slot)] = feats
        events.append(
            ImpressionEvent(
                day=day,
                slot=slot,
                user_id=user_id,
                features=feats,
                ad=ad,
                labels=labels,
                gt_probs=tuple(float(x) for x in gt),
            )
        )
    if off != len(body):
        raise DayFileError(f"{path}: trailing bytes")
    return events


class DayFileStream:
    """Stream over gen-data output: one file per day, read lazily."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._cache: dict[int, list[ImpressionEvent]] = {}

    def path_for(self, day: int) -> Path:
        return self.directory / f"day_{day:04d}.bin"

    def events_for_day(self, day: int) -> list[ImpressionEvent]:
        if day not in self._cache:
            path = self.path_for(day)
            if not path.exists():
                raise FileNotFoundError(f"no day file for day {day}: {path}")
            self._cache.clear()
            self._cache[day] = read_day_file(path)
        return self._cache[day]
