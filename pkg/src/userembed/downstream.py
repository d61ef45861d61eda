"""The downstream ranker: a small logistic model over embedding, ad, and a
restricted user-feature subset, deliberately tiny so the marginal value of
upstream embeddings is visible."""

from __future__ import annotations

import numpy as np

from .tensor import stable_sigmoid

__all__ = ["DownstreamModel"]


class DownstreamModel:
    """Logistic click model trained with mini-batch Adam.

    `groups` names the column ranges of the feature matrix (used by the
    permutation-importance report); inputs are standardized with the
    training split's statistics.
    """

    def __init__(
        self,
        n_features: int,
        groups: dict[str, tuple[int, int]],
        seed: int = 0,
        lr: float = 0.03,
        l2: float = 1e-6,
    ):
        self.n_features = n_features
        self.groups = dict(groups)
        self.lr = lr
        self.l2 = l2
        self.seed = seed
        self.w = np.zeros(n_features, dtype=np.float64)
        self.b = 0.0
        self._mu = np.zeros(n_features, dtype=np.float64)
        self._sd = np.ones(n_features, dtype=np.float64)
        self._fitted = False

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self._mu) / self._sd

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: int = 3, batch: int = 8192) -> float:
        """Returns the final-epoch mean log loss."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape[1] != self.n_features:
            raise ValueError(f"feature width {x.shape[1]} != configured {self.n_features}")
        self._mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd < 1e-8] = 1.0
        self._sd = sd
        self._fitted = True
        xs = self._standardize(x)
        base = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self.b = float(np.log(base / (1.0 - base)))
        rng = np.random.Generator(np.random.PCG64(self.seed))
        m = np.zeros_like(self.w)
        v = np.zeros_like(self.w)
        mb = vb = 0.0
        t = 0
        last = 0.0
        n = len(y)
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, batch):
                idx = order[lo : lo + batch]
                xb, yb = xs[idx], y[idx]
                z = xb @ self.w + self.b
                p = stable_sigmoid(z)
                err = p - yb
                gw = xb.T @ err / len(idx) + self.l2 * self.w
                gb = float(err.mean())
                t += 1
                m = 0.9 * m + 0.1 * gw
                v = 0.999 * v + 0.001 * gw * gw
                mb = 0.9 * mb + 0.1 * gb
                vb = 0.999 * vb + 0.001 * gb * gb
                mh = m / (1 - 0.9**t)
                vh = v / (1 - 0.999**t)
                self.w -= self.lr * mh / (np.sqrt(vh) + 1e-8)
                self.b -= self.lr * (mb / (1 - 0.9**t)) / (np.sqrt(vb / (1 - 0.999**t)) + 1e-8)
                pc = np.clip(p, 1e-7, 1 - 1e-7)
                total += float(-np.sum(yb * np.log(pc) + (1 - yb) * np.log1p(-pc)))
            last = total / n
        return last

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if not self._fitted:
            raise RuntimeError("model not fitted")
        xs = self._standardize(np.asarray(x, dtype=np.float64))
        return stable_sigmoid(xs @ self.w + self.b)
