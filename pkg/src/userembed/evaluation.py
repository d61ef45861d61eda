"""Prediction-quality metrics: normalized entropy, permutation feature
importance, and the embedding distribution-shift report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import stable_sigmoid

__all__ = [
    "DegenerateLabelsError",
    "PRED_CLAMP",
    "normalized_entropy",
    "log_loss",
    "permutation_importance",
    "SlotShift",
    "embedding_shift_report",
    "pool_sequence",
]

PRED_CLAMP = 1e-7


class DegenerateLabelsError(ValueError):
    """All labels identical: the background-CTR denominator is zero."""


def log_loss(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary log loss with predictions clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def normalized_entropy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Average log loss divided by the log loss of the constant background-CTR
    predictor. 1.0 means no better than predicting the average rate; lower is
    better."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise DegenerateLabelsError("no examples")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    ctr = float(y.mean())
    if ctr == 0.0 or ctr == 1.0:
        raise DegenerateLabelsError(
            f"all labels equal {int(ctr)}; background entropy is zero"
        )
    denominator = -(ctr * np.log(ctr) + (1.0 - ctr) * np.log(1.0 - ctr))
    return log_loss(predictions, y) / denominator


def permutation_importance(
    predict_fn,
    features: np.ndarray,
    labels: np.ndarray,
    groups: Mapping[str, tuple[int, int]],
    seed: int = 0,
    repeats: int = 3,
) -> list[tuple[str, float]]:
    """Rank feature groups by the NE degradation their permutation causes.

    `groups` maps a group name to its [start, stop) column range in the
    feature matrix; each group is shuffled jointly across examples. Returns
    (name, mean NE increase) sorted worst-degradation first.
    """
    base = normalized_entropy(predict_fn(features), labels)
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for name, (c0, c1) in groups.items():
        deltas = []
        for _ in range(repeats):
            perm = rng.permutation(features.shape[0])
            shuffled = features.copy()
            shuffled[:, c0:c1] = features[perm, c0:c1]
            deltas.append(normalized_entropy(predict_fn(shuffled), labels) - base)
        results.append((name, float(np.mean(deltas))))
    results.sort(key=lambda kv: kv[1], reverse=True)
    return results


@dataclass(frozen=True)
class SlotShift:
    """Consecutive-version similarity statistics for one embedding slot."""

    slot: int
    mean_cosine: float
    mean_l2_change_pct: float
    pairs: int
    skipped_zero_norm: int


def pool_sequence(seq: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over up to `window` versions, per day: out[d] =
    mean(seq[max(0, d-window+1) .. d])."""
    if window < 1:
        raise ValueError("pooling window must be >= 1")
    out = np.empty_like(np.asarray(seq, dtype=np.float64))
    seq64 = np.asarray(seq, dtype=np.float64)
    for d in range(seq64.shape[0]):
        lo = max(0, d - window + 1)
        out[d] = seq64[lo : d + 1].mean(axis=0)
    return out


def embedding_shift_report(
    sequences: Mapping[object, np.ndarray],
    pooling_window: int | None = None,
) -> list[SlotShift]:
    """Per-slot consecutive-day cosine similarity and L2-norm change.

    `sequences` maps a user to a [days x K x D] array of that user's
    embeddings from consecutive snapshots. With `pooling_window` P, each
    day's embedding is first replaced by the trailing mean over up to P
    versions. Zero-norm embeddings are excluded and counted.
    """
    if not sequences:
        raise ValueError("shift report needs at least one user sequence")
    k = next(iter(sequences.values())).shape[1]
    cos_acc = [[] for _ in range(k)]
    l2_acc = [[] for _ in range(k)]
    skipped = [0] * k
    for seq in sequences.values():
        arr = np.asarray(seq, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != k:
            raise ValueError(f"sequence must be [days x {k} x D], got {arr.shape}")
        if arr.shape[0] < 2:
            continue
        for slot in range(k):
            s = arr[:, slot, :]
            if pooling_window is not None:
                s = pool_sequence(s, pooling_window)
            norms = np.linalg.norm(s, axis=1)
            for d in range(s.shape[0] - 1):
                if norms[d] == 0.0 or norms[d + 1] == 0.0:
                    skipped[slot] += 1
                    continue
                cos_acc[slot].append(float(s[d] @ s[d + 1] / (norms[d] * norms[d + 1])))
                l2_acc[slot].append(abs(norms[d + 1] - norms[d]) / norms[d] * 100.0)
    report = []
    for slot in range(k):
        n_pairs = len(cos_acc[slot])
        report.append(
            SlotShift(
                slot=slot,
                mean_cosine=float(np.mean(cos_acc[slot])) if n_pairs else float("nan"),
                mean_l2_change_pct=float(np.mean(l2_acc[slot])) if n_pairs else float("nan"),
                pairs=n_pairs,
                skipped_zero_norm=skipped[slot],
            )
        )
    return report
