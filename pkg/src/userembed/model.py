"""The upstream user model: hashed embeddings, pyramid tower, mix tower.

Token matrices are rows-of-tokens [N x D]. The dot-compression extractor
internally works in the column layout [D x N] where its attention product
is shape-consistent; see `dot_compression_attention`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "SchemaError",
    "ExtractorSpec",
    "LayerSpec",
    "TowerConfig",
    "ModelConfig",
    "UserFeatures",
    "EmbeddingTable",
    "UserModel",
    "hash_bucket",
    "dcn_cross_stack",
    "mixer_block",
    "dot_compression_attention",
    "multi_task_loss",
    "default_model_config",
]

EXTRACTOR_KINDS = ("mlp", "dot_compression", "dcn", "mixer")


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


class SchemaError(ValueError):
    """Features do not match the model's configured schema."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str
    out_tokens: int
    hidden: int = 32
    depth: int = 2          # dcn cross-layer count
    lc_tokens: int = 4      # dot-compression linear-compression width


@dataclass(frozen=True)
class LayerSpec:
    extractors: tuple[ExtractorSpec, ...]
    residual_tokens: int = 0
    residual_hidden: int = 32
    reinject_dense: bool = True

    def out_tokens(self, n_dense: int) -> int:
        total = sum(e.out_tokens for e in self.extractors) + self.residual_tokens
        if self.reinject_dense:
            total += n_dense
        return total


@dataclass(frozen=True)
class TowerConfig:
    layers: tuple[LayerSpec, ...]
    dim: int
    k_embeddings: int
    n_dense_tokens: int


@dataclass(frozen=True)
class ModelConfig:
    sparse_features: tuple[str, ...]
    sparse_buckets: int
    dense_inputs: int
    ad_inputs: int
    tower: TowerConfig
    mix_hidden: tuple[int, ...] = (32,)
    ad_proj: int = 8
    tasks: int = 2
    hash_seed: int = 0x5157_3ACE

    def validate(self) -> None:
        tw = self.tower
        if len(self.sparse_features) != len(set(self.sparse_features)):
            raise ConfigError("duplicate sparse feature names")
        if self.sparse_buckets < 2 or self.sparse_buckets & (self.sparse_buckets - 1):
            raise ConfigError("sparse_buckets must be a power of two >= 2")
        if min(tw.dim, tw.k_embeddings, tw.n_dense_tokens, self.dense_inputs, self.ad_inputs) < 1:
            raise ConfigError("dimensions must be positive")
        if self.tasks < 1:
            raise ConfigError("need at least one task")
        if not tw.layers:
            raise ConfigError("tower needs at least one layer")
        count = len(self.sparse_features)
        if count <= tw.k_embeddings:
            raise ConfigError("pyramid needs more input tokens than output embeddings")
        for i, layer in enumerate(tw.layers):
            for ex in layer.extractors:
                if ex.kind not in EXTRACTOR_KINDS:
                    raise ConfigError(f"unknown extractor kind {ex.kind!r}")
                if ex.out_tokens < 1:
                    raise ConfigError("extractor must emit at least one token")
            nxt = layer.out_tokens(tw.n_dense_tokens)
            if nxt > count:
                raise ConfigError(
                    f"layer {i} grows the token count ({count} -> {nxt}); pyramid must not widen"
                )
            count = nxt
        last = tw.layers[-1]
        if last.reinject_dense:
            raise ConfigError("final layer must not re-inject dense tokens")
        if count != tw.k_embeddings:
            raise ConfigError(
                f"final layer yields {count} tokens, config demands K={tw.k_embeddings}"
            )

    def config_hash(self) -> str:
        blob = json.dumps(
            {
                "sparse_features": list(self.sparse_features),
                "sparse_buckets": self.sparse_buckets,
                "dense_inputs": self.dense_inputs,
                "ad_inputs": self.ad_inputs,
                "dim": self.tower.dim,
                "k": self.tower.k_embeddings,
                "n_dense": self.tower.n_dense_tokens,
                "layers": [
                    {
                        "extractors": [
                            [e.kind, e.out_tokens, e.hidden, e.depth, e.lc_tokens]
                            for e in l.extractors
                        ],
                        "residual_tokens": l.residual_tokens,
                        "residual_hidden": l.residual_hidden,
                        "reinject_dense": l.reinject_dense,
                    }
                    for l in self.tower.layers
                ],
                "mix_hidden": list(self.mix_hidden),
                "ad_proj": self.ad_proj,
                "tasks": self.tasks,
                "hash_seed": self.hash_seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# features and embedding tables

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xFF51AFD7ED558CCD)


def hash_bucket(ids, seed: int, num_buckets: int) -> np.ndarray:
    """Seeded multiplicative 64-bit hash onto [0, num_buckets); buckets a power of two."""
    with np.errstate(over="ignore"):
        x = np.asarray(ids, dtype=np.uint64) ^ np.uint64(seed)
        x = x * _MIX1
        x ^= x >> np.uint64(33)
        x = x * _MIX2
        x ^= x >> np.uint64(29)
    return (x & np.uint64(num_buckets - 1)).astype(np.int64)


@dataclass(eq=False)
class UserFeatures:
    """Sparse id lists (schema order) plus the raw dense vector for one user."""

    sparse: tuple[tuple[str, tuple[int, ...]], ...]
    dense: np.ndarray
    _bucket_cache: dict = field(default=None, repr=False, compare=False)


class EmbeddingTable:
    """Hash-bucketed embedding rows for one sparse feature."""

    def __init__(self, name: str, num_buckets: int, dim: int, hash_seed: int, rng: np.random.Generator):
        if num_buckets < 2:
            raise ConfigError("embedding table needs at least 2 buckets")
        self.name = name
        self.num_buckets = num_buckets
        self.dim = dim
        self.hash_seed = hash_seed
        # fan_in of a lookup is the table size: untrained buckets stay near
        # zero, so never-seen ids read as missing rather than as noise
        bound = 1.0 / np.sqrt(num_buckets)
        self.weights = Tensor(
            rng.uniform(-bound, bound, size=(num_buckets, dim)).astype(np.float32),
            requires_grad=True,
        )

    def bucket(self, ids) -> np.ndarray:
        return hash_bucket(ids, self.hash_seed, self.num_buckets)

    def lookup(self, one_id: int) -> np.ndarray:
        return self.weights.data[int(self.bucket([one_id])[0])]


# ---------------------------------------------------------------------------
# extractor building blocks (functional forms, used by UserModel and tests)


class MlpParams(NamedTuple):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class DotCompressionParams(NamedTuple):
    lc_x: Tensor       # [lc x N] weighted row sums over sparse tokens
    lc_d: Tensor       # [lc x N_dense]
    y_w1: Tensor
    y_b1: Tensor
    y_w2: Tensor
    y_b2: Tensor
    lc2_x: Tensor
    lc2_d: Tensor
    z_w1: Tensor
    z_b1: Tensor
    z_w2: Tensor
    z_b2: Tensor
    out_tokens: int


class MixerParams(NamedTuple):
    ln1_gain: Tensor
    ln1_shift: Tensor
    tok_w1: Tensor     # [N x H]
    tok_w2: Tensor     # [H x N]
    ln2_gain: Tensor
    ln2_shift: Tensor
    ch_w1: Tensor      # [D x H]
    ch_w2: Tensor      # [H x D]


class DcnParams(NamedTuple):
    crosses: tuple[tuple[Tensor, Tensor], ...]   # (w [F x F], b [1 x F]) per depth
    head_w: Tensor
    head_b: Tensor


def _mlp2(x_flat: Tensor, p: MlpParams) -> Tensor:
    return T.mlp2(x_flat, p.w1, p.b1, p.w2, p.b2)


def dcn_cross_stack(x0: Tensor, crosses: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Stacked cross layers: x_{n+1} = x0 * (x_n @ W + b) + x_n, x as a row vector."""
    x = x0
    for w, b in crosses:
        x = T.add(T.mul(x0, T.linear(x, w, b)), x)
    return x


def mixer_block(x: Tensor, p: MixerParams) -> Tensor:
    """Token mixing across rows, then channel mixing across columns, both residual."""
    t = T.transpose(T.layer_norm(x, p.ln1_gain, p.ln1_shift))      # [D x N]
    t = T.mm_relu_mm(t, p.tok_w1, p.tok_w2)                        # [D x N]
    y = T.add(x, T.transpose(t))
    c = T.layer_norm(y, p.ln2_gain, p.ln2_shift)
    c = T.mm_relu_mm(c, p.ch_w1, p.ch_w2)                          # [N x D]
    return T.add(y, c)


def dot_compression_attention(x: Tensor, x_dense: Tensor, p: DotCompressionParams) -> Tensor:
    """Compressed pairwise-product attention with a residual branch.

    With tokens as columns (Xc = x^T, a D x N matrix), the result is
    Xc @ (Xc^T Y + Z) where Y = mlp(concat(lc(x_dense), lc(x))) reshaped to
    D x M and Z likewise reshaped to N x M. Returned in row layout [M x D].
    """
    n, d = x.shape
    m = p.out_tokens
    lcx = T.weighted_row_sum(x, p.lc_x)
    lcd = T.weighted_row_sum(x_dense, p.lc_d)
    y_in = T.concat_cols([
        T.reshape(lcd, 1, lcd.data.size),
        T.reshape(lcx, 1, lcx.data.size),
    ])
    y = T.reshape(_mlp2(y_in, MlpParams(p.y_w1, p.y_b1, p.y_w2, p.y_b2)), d, m)
    lc2x = T.weighted_row_sum(x, p.lc2_x)
    lc2d = T.weighted_row_sum(x_dense, p.lc2_d)
    z_in = T.concat_cols([
        T.reshape(lc2d, 1, lc2d.data.size),
        T.reshape(lc2x, 1, lc2x.data.size),
    ])
    z = T.reshape(_mlp2(z_in, MlpParams(p.z_w1, p.z_b1, p.z_w2, p.z_b2)), n, m)
    attn = T.add(T.matmul(x, y), z)                  # [N x M] = Xc^T Y + Z
    return T.transpose(T.matmul(T.transpose(x), attn))


def multi_task_loss(logits: Tensor, labels: Tensor, task_weights: Tensor) -> Tensor:
    """Batch-mean weighted cross entropy over T sigmoid tasks (scalar)."""
    return T.weighted_bce_mean(logits, labels, task_weights)


# ---------------------------------------------------------------------------
# the model


class UserModel:
    """Pyramid user tower plus MLP mix tower over hashed feature embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(seed))

        self.tables: dict[str, EmbeddingTable] = {}
        for name in config.sparse_features:
            table = EmbeddingTable(name, config.sparse_buckets, config.tower.dim, config.hash_seed, rng)
            self.tables[name] = table
            self.params[f"table.{name}"] = table.weights

        d = config.tower.dim
        nd = config.tower.n_dense_tokens
        self._p("dense.w", rng, config.dense_inputs, nd * d)
        self._p("dense.b", rng, 1, nd * d, fan_in=config.dense_inputs)

        self._layers: list[list[tuple[str, object, ExtractorSpec]]] = []
        self._res_params: list[MlpParams | None] = []
        count = len(config.sparse_features)
        for li, layer in enumerate(config.tower.layers):
            built: list[tuple[str, object, ExtractorSpec]] = []
            for ei, ex in enumerate(layer.extractors):
                prefix = f"layer{li}.ex{ei}"
                built.append((ex.kind, self._build_extractor(prefix, ex, rng, count, nd, d), ex))
            if layer.residual_tokens > 0:
                rp = MlpParams(
                    self._p(f"layer{li}.res.w1", rng, count * d, layer.residual_hidden),
                    self._p(f"layer{li}.res.b1", rng, 1, layer.residual_hidden, fan_in=count * d),
                    self._p(f"layer{li}.res.w2", rng, layer.residual_hidden, layer.residual_tokens * d),
                    self._p(f"layer{li}.res.b2", rng, 1, layer.residual_tokens * d, fan_in=layer.residual_hidden),
                )
            else:
                rp = None
            self._res_params.append(rp)
            self._layers.append(built)
            count = layer.out_tokens(nd)

        k = config.tower.k_embeddings
        mix_in = k * d + config.ad_proj
        self._p("mix.ad.w", rng, config.ad_inputs, config.ad_proj)
        self._p("mix.ad.b", rng, 1, config.ad_proj, fan_in=config.ad_inputs)
        widths = [mix_in, *config.mix_hidden]
        for i in range(len(config.mix_hidden)):
            self._p(f"mix.h{i}.w", rng, widths[i], widths[i + 1])
            self._p(f"mix.h{i}.b", rng, 1, widths[i + 1], fan_in=widths[i])
        self._p("mix.out.w", rng, widths[-1], config.tasks)
        self._p("mix.out.b", rng, 1, config.tasks, fan_in=widths[-1])

    # -- parameter plumbing

    def _p(self, name: str, rng: np.random.Generator, rows: int, cols: int, fan_in: int | None = None) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in if fan_in is not None else rows)
        tn = Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32), requires_grad=True)
        self.params[name] = tn
        return tn

    def _ln(self, name: str, d: int) -> tuple[Tensor, Tensor]:
        gain = Tensor(np.ones((1, d), dtype=np.float32), requires_grad=True)
        shift = Tensor(np.zeros((1, d), dtype=np.float32), requires_grad=True)
        self.params[f"{name}.gain"] = gain
        self.params[f"{name}.shift"] = shift
        return gain, shift

    def _build_extractor(self, prefix, ex: ExtractorSpec, rng, n: int, nd: int, d: int):
        if ex.kind == "mlp":
            return MlpParams(
                self._p(f"{prefix}.w1", rng, n * d, ex.hidden),
                self._p(f"{prefix}.b1", rng, 1, ex.hidden, fan_in=n * d),
                self._p(f"{prefix}.w2", rng, ex.hidden, ex.out_tokens * d),
                self._p(f"{prefix}.b2", rng, 1, ex.out_tokens * d, fan_in=ex.hidden),
            )
        if ex.kind == "dot_compression":
            lc = ex.lc_tokens
            flat = 2 * lc * d
            return DotCompressionParams(
                lc_x=self._p(f"{prefix}.lc_x", rng, lc, n, fan_in=n),
                lc_d=self._p(f"{prefix}.lc_d", rng, lc, nd, fan_in=nd),
                y_w1=self._p(f"{prefix}.y_w1", rng, flat, ex.hidden),
                y_b1=self._p(f"{prefix}.y_b1", rng, 1, ex.hidden, fan_in=flat),
                y_w2=self._p(f"{prefix}.y_w2", rng, ex.hidden, d * ex.out_tokens),
                y_b2=self._p(f"{prefix}.y_b2", rng, 1, d * ex.out_tokens, fan_in=ex.hidden),
                lc2_x=self._p(f"{prefix}.lc2_x", rng, lc, n, fan_in=n),
                lc2_d=self._p(f"{prefix}.lc2_d", rng, lc, nd, fan_in=nd),
                z_w1=self._p(f"{prefix}.z_w1", rng, flat, ex.hidden),
                z_b1=self._p(f"{prefix}.z_b1", rng, 1, ex.hidden, fan_in=flat),
                z_w2=self._p(f"{prefix}.z_w2", rng, ex.hidden, n * ex.out_tokens),
                z_b2=self._p(f"{prefix}.z_b2", rng, 1, n * ex.out_tokens, fan_in=ex.hidden),
                out_tokens=ex.out_tokens,
            )
        if ex.kind == "mixer":
            h = ex.hidden
            ln1 = self._ln(f"{prefix}.ln1", d)
            ln2 = self._ln(f"{prefix}.ln2", d)
            return (
                MixerParams(
                    ln1_gain=ln1[0], ln1_shift=ln1[1],
                    tok_w1=self._p(f"{prefix}.tok_w1", rng, n, h),
                    tok_w2=self._p(f"{prefix}.tok_w2", rng, h, n),
                    ln2_gain=ln2[0], ln2_shift=ln2[1],
                    ch_w1=self._p(f"{prefix}.ch_w1", rng, d, h),
                    ch_w2=self._p(f"{prefix}.ch_w2", rng, h, d),
                ),
                self._p(f"{prefix}.head", rng, ex.out_tokens, n, fan_in=n),
            )
        if ex.kind == "dcn":
            f = n * d
            crosses = tuple(
                (
                    self._p(f"{prefix}.cross{i}.w", rng, f, f),
                    self._p(f"{prefix}.cross{i}.b", rng, 1, f, fan_in=f),
                )
                for i in range(ex.depth)
            )
            return DcnParams(
                crosses=crosses,
                head_w=self._p(f"{prefix}.head.w", rng, f, ex.out_tokens * d),
                head_b=self._p(f"{prefix}.head.b", rng, 1, ex.out_tokens * d, fan_in=f),
            )
        raise ConfigError(f"unknown extractor kind {ex.kind!r}")

    # -- feature embedding

    def _buckets_for(self, feats: UserFeatures) -> list[np.ndarray]:
        key = (self.config.hash_seed, self.config.sparse_buckets)
        cache = feats._bucket_cache
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        by_name = dict(feats.sparse)
        if len(by_name) != len(feats.sparse):
            raise SchemaError("duplicate feature name in features")
        buckets = []
        for name in self.config.sparse_features:
            if name not in by_name:
                raise SchemaError(f"feature {name!r} missing from input features")
            ids = by_name.pop(name)
            buckets.append(self.tables[name].bucket(ids) if ids else _EMPTY_IDX)
        if by_name:
            raise SchemaError(f"unknown feature names {sorted(by_name)}")
        if feats._bucket_cache is None:
            feats._bucket_cache = {}
        feats._bucket_cache[key] = buckets
        return buckets

    def embed_features(self, feats: UserFeatures) -> tuple[Tensor, Tensor]:
        """Mean-pooled sparse tokens [N0 x D] and projected dense tokens [Nd x D]."""
        if feats.dense.shape != (self.config.dense_inputs,):
            raise SchemaError(
                f"dense vector has shape {feats.dense.shape}, config wants ({self.config.dense_inputs},)"
            )
        buckets = self._buckets_for(feats)
        d = self.config.tower.dim
        sources = [
            (self.tables[name].weights, idx)
            for name, idx in zip(self.config.sparse_features, buckets)
        ]
        x_sparse = T.row_means_stack(sources, dim=d)
        dense_row = Tensor(feats.dense.reshape(1, -1))
        x_dense = T.reshape(
            T.linear(dense_row, self.params["dense.w"], self.params["dense.b"]),
            self.config.tower.n_dense_tokens,
            d,
        )
        return x_sparse, x_dense

    def missing_sparse(self, feats: UserFeatures) -> tuple[str, ...]:
        """Names of configured features whose id list is empty (coverage flag)."""
        return tuple(name for name, ids in feats.sparse if not ids)

    # -- tower

    def _run_extractor(self, kind: str, params, spec: ExtractorSpec, x: Tensor, x_dense: Tensor) -> Tensor:
        d = self.config.tower.dim
        if kind == "mlp":
            flat = T.reshape(x, 1, x.data.size)
            return T.reshape(_mlp2(flat, params), spec.out_tokens, d)
        if kind == "dot_compression":
            return dot_compression_attention(x, x_dense, params)
        if kind == "mixer":
            mp, head = params
            return T.weighted_row_sum(mixer_block(x, mp), head)
        if kind == "dcn":
            x0 = T.reshape(x, 1, x.data.size)
            crossed = dcn_cross_stack(x0, params.crosses)
            return T.reshape(T.linear(crossed, params.head_w, params.head_b), spec.out_tokens, d)
        raise ConfigError(kind)

    def interaction_layer(self, li: int, x: Tensor, x_dense: Tensor) -> Tensor:
        layer = self.config.tower.layers[li]
        parts = [
            self._run_extractor(kind, params, spec, x, x_dense)
            for kind, params, spec in self._layers[li]
        ]
        if layer.reinject_dense:
            parts.append(x_dense)
        rp = self._res_params[li]
        if rp is not None:
            flat = T.reshape(x, 1, x.data.size)
            parts.append(T.reshape(_mlp2(flat, rp), layer.residual_tokens, self.config.tower.dim))
        return T.concat_rows(parts)

    def tower_forward(self, feats: UserFeatures) -> Tensor:
        """All interaction layers; returns the K output embeddings as [K x D]."""
        x, x_dense = self.embed_features(feats)
        for li in range(len(self.config.tower.layers)):
            x = self.interaction_layer(li, x, x_dense)
        return x

    def user_embeddings(self, feats: UserFeatures) -> np.ndarray:
        """Inference-only tower forward as a plain [K x D] fp32 array."""
        with T.no_grad():
            return self.tower_forward(feats).data

    # -- mix tower and loss

    def mix_forward(self, user_flat: Tensor, ads: Tensor) -> Tensor:
        """Logits [B x T] from flattened user embeddings [B x K*D] and ad rows [B x A]."""
        adp = T.linear(ads, self.params["mix.ad.w"], self.params["mix.ad.b"])
        h = T.concat_cols([user_flat, adp])
        for i in range(len(self.config.mix_hidden)):
            h = T.relu(T.linear(h, self.params[f"mix.h{i}.w"], self.params[f"mix.h{i}.b"]))
        return T.linear(h, self.params["mix.out.w"], self.params["mix.out.b"])

    def mix_tower_forward(self, user_emb: Tensor, ad_vec: np.ndarray) -> Tensor:
        """Single-example logits [1 x T] from [K x D] user embeddings."""
        k, d = user_emb.shape
        flat = T.reshape(user_emb, 1, k * d)
        return self.mix_forward(flat, Tensor(ad_vec.reshape(1, -1)))

    def batch_logits(self, features: Sequence[UserFeatures], ads: np.ndarray) -> Tensor:
        k = self.config.tower.k_embeddings
        d = self.config.tower.dim
        flats = [T.reshape(self.tower_forward(f), 1, k * d) for f in features]
        user_mat = flats[0] if len(flats) == 1 else T.concat_rows(flats)
        return self.mix_forward(user_mat, Tensor(np.ascontiguousarray(ads, dtype=np.float32)))


_EMPTY_IDX = np.empty(0, dtype=np.int64)


def default_model_config(
    feature_names: Sequence[str],
    dense_inputs: int,
    ad_inputs: int,
    dim: int = 16,
    k_embeddings: int = 2,
    n_dense_tokens: int = 8,
    tasks: int = 2,
    sparse_buckets: int = 1024,
) -> ModelConfig:
    """Desk-scale default: three layers running mlp/dot-compression/mixer in parallel."""
    layers = (
        LayerSpec(
            extractors=(
                ExtractorSpec("mlp", out_tokens=3, hidden=48),
                ExtractorSpec("dot_compression", out_tokens=3, hidden=32, lc_tokens=4),
                ExtractorSpec("mixer", out_tokens=2, hidden=24),
            ),
            residual_tokens=2,
            residual_hidden=32,
        ),
        LayerSpec(
            extractors=(
                ExtractorSpec("mlp", out_tokens=2, hidden=32),
                ExtractorSpec("dot_compression", out_tokens=2, hidden=24, lc_tokens=3),
                ExtractorSpec("mixer", out_tokens=1, hidden=16),
            ),
            residual_tokens=1,
            residual_hidden=24,
        ),
        LayerSpec(
            extractors=(
                ExtractorSpec("mlp", out_tokens=1, hidden=24),
                ExtractorSpec("dot_compression", out_tokens=1, hidden=16, lc_tokens=3),
            ),
            residual_tokens=0,
            reinject_dense=False,
        ),
    )
    return ModelConfig(
        sparse_features=tuple(feature_names),
        sparse_buckets=sparse_buckets,
        dense_inputs=dense_inputs,
        ad_inputs=ad_inputs,
        tower=TowerConfig(layers=layers, dim=dim, k_embeddings=k_embeddings, n_dense_tokens=n_dense_tokens),
        mix_hidden=(32,),
        ad_proj=8,
        tasks=tasks,
    )
