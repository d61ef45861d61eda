"""Dense rank-2 fp32 tensors with define-by-run reverse-mode differentiation.

Ops append their outputs to an implicit tape; because a result can only be
built from tensors that already exist, creation order is a topological order
and `backward` is a single reverse sweep over the tape. Model math runs in
fp32. Feeding float64 data through the same ops promotes the touched
subgraph to float64, which is how the finite-difference checker gets its
precision without a second code path.

Tensors are treated as immutable once constructed: ops may return views of
their inputs' storage, and gradient arrays are shared structurally, so
callers must never write into `data` or `grad` of a tensor they did not
create. The optimizer, which owns its parameters, is the one sanctioned
exception.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "tape_clear",
    "tape_size",
    "check_finite",
    "make_op",
    "linear",
    "matmul",
    "weighted_row_sum",
    "layer_norm",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "transpose",
    "reshape",
    "row_means_stack",
    "sum_all",
    "mlp2",
    "mm_relu_mm",
    "accum_grad",
    "stable_sigmoid",
    "weighted_bce_mean",
    "backward",
    "zero_grads",
    "grad_check",
    "grad_check_params",
    "promote_to_float64",
]


class ShapeError(ValueError):
    """An operand does not satisfy an op's shape contract."""


_FP32 = np.float32

_grad_enabled: bool = True
_finite_checks: bool = False
_tape: list["Tensor"] = []


class Tensor:
    """A rank-2 array plus the bookkeeping for reverse-mode autodiff.

    1-D input is promoted to a single row. dtype is forced to float32 unless
    the caller hands in float64 explicitly (the gradient checker does).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_track", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are rank-2, got shape {arr.shape}")
        if arr.dtype != np.float64 and arr.dtype != _FP32:
            arr = arr.astype(_FP32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._track = requires_grad
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards inside run as plain array math."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def check_finite():
    """Raise FloatingPointError as soon as an op produces NaN/Inf (test aid)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = True
    try:
        yield
    finally:
        _finite_checks = prev


def tape_clear() -> None:
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


def _fresh(data: np.ndarray) -> Tensor:
    # Internal fast path: data must already be a rank-2 float array.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = None
    t._bwd = None
    t._track = False
    t._grad_owned = False
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    # A freshly assigned grad may alias an array shared with sibling nodes,
    # so the first accumulation allocates; once the buffer is owned,
    # accumulation is in place.
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


accum_grad = _accum


def _owned_grad_buffer(t: Tensor) -> np.ndarray:
    """Grad buffer that is safe to update in place (for scatter-style ops)."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        t._grad_owned = True
    elif not t._grad_owned:
        t.grad = t.grad.copy()
        t._grad_owned = True
    return t.grad


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    bwd: Callable[[np.ndarray], None],
) -> Tensor:
    """Build an op output node; extension point for fused ops elsewhere.

    `data` must already be a rank-2 float32/float64 array.
    """
    out = _fresh(data)
    if _finite_checks and not np.isfinite(data).all():
        raise FloatingPointError("op produced non-finite values")
    if _grad_enabled:
        for p in parents:
            if p._track:
                out._parents = tuple(parents)
                out._bwd = bwd
                out._track = True
                _tape.append(out)
                break
    return out


# ---------------------------------------------------------------------------
# forward ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with b broadcast over rows. b may be omitted."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.data.shape != (1, w.data.shape[1]):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, g @ w.data.T)
        if w._track:
            _accum(w, x.data.T @ g)
        if b is not None and b._track:
            _accum(b, g.sum(axis=0, keepdims=True))

    return make_op(out, (x, w) if b is None else (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.shape} does not match {b.shape}")

    def bwd(g: np.ndarray) -> None:
        if a._track:
            _accum(a, g @ b.data.T)
        if b._track:
            _accum(b, a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), bwd)


def weighted_row_sum(x: Tensor, weights: Tensor) -> Tensor:
    """Rows of the output are weighted sums of the rows of x: weights @ x."""
    if weights.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"weighted_row_sum: weights {weights.shape} do not match input {x.shape}")
    return matmul(weights, x)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization to zero mean / unit variance, then gain & shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.data.shape[1]
    if gain.data.shape != (1, d) or shift.data.shape != (1, d):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match input {x.shape}"
        )
    inv_d = 1.0 / d
    mu = x.data.sum(axis=1, keepdims=True)
    mu *= inv_d
    xc = x.data - mu
    var = (xc * xc).sum(axis=1, keepdims=True)
    var *= inv_d
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bwd(g: np.ndarray) -> None:
        gy = g * gain.data
        if x._track:
            m1 = gy.sum(axis=1, keepdims=True)
            m1 *= inv_d
            m2 = (gy * xhat).sum(axis=1, keepdims=True)
            m2 *= inv_d
            _accum(x, inv * (gy - m1 - xhat * m2))
        if gain._track:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        if shift._track:
            _accum(shift, g.sum(axis=0, keepdims=True))

    return make_op(out, (x, gain, shift), bwd)


def relu(x: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, g * (x.data > 0))

    return make_op(np.maximum(x.data, 0), (x,), bwd)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bwd(g: np.ndarray) -> None:
        if a._track:
            _accum(a, g)
        if b._track:
            _accum(b, g)

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bwd(g: np.ndarray) -> None:
        if a._track:
            _accum(a, g)
        if b._track:
            _accum(b, -g)

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bwd(g: np.ndarray) -> None:
        if a._track:
            _accum(a, g * b.data)
        if b._track:
            _accum(b, g * a.data)

    return make_op(a.data * b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, g * c)

    return make_op(x.data * np.asarray(c, dtype=x.data.dtype), (x,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: no parts")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column mismatch {p.shape} vs {(parts[0].shape)}"
            )

    def bwd(g: np.ndarray) -> None:
        r0 = 0
        for p in parts:
            r1 = r0 + p.data.shape[0]
            if p._track:
                _accum(p, g[r0:r1])
            r0 = r1

    return make_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: no parts")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise ShapeError(f"concat_cols: row mismatch {p.shape} vs {(parts[0].shape)}")

    def bwd(g: np.ndarray) -> None:
        c0 = 0
        for p in parts:
            c1 = c0 + p.data.shape[1]
            if p._track:
                _accum(p, g[:, c0:c1])
            c0 = c1

    return make_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")

    def bwd(g: np.ndarray) -> None:
        if x._track:
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            _accum(x, buf)

    return make_op(x.data[start:stop], (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, g.T)

    return make_op(x.data.T, (x,), bwd)


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape: {x.shape} has {x.data.size} values, not {rows}x{cols}")

    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, g.reshape(x.data.shape))

    return make_op(x.data.reshape(rows, cols), (x,), bwd)


def row_means_stack(sources: Sequence[tuple[Tensor, np.ndarray]], dim: int) -> Tensor:
    """Stack the mean of selected rows from each source into one matrix.

    Each (table, indices) pair contributes one output row: the mean of the
    indexed rows. Empty index lists yield a zero row. Duplicate indices count
    once per occurrence, so the mean over {a, a} equals row a.
    """
    if not sources:
        raise ShapeError("row_means_stack: no sources")
    dtype = np.result_type(*(t.data.dtype for t, _ in sources))
    out = np.zeros((len(sources), dim), dtype=dtype)
    for f, (tab, idx) in enumerate(sources):
        if tab.data.shape[1] != dim:
            raise ShapeError(f"row_means_stack: source {f} width {tab.shape} != dim {dim}")
        n = len(idx)
        if n == 1:
            out[f] = tab.data[idx[0]]
        elif n == 2:
            np.add(tab.data[idx[0]], tab.data[idx[1]], out=out[f])
            out[f] *= 0.5
        elif n > 2:
            tab.data[idx].sum(axis=0, out=out[f])
            out[f] *= 1.0 / n

    def bwd(g: np.ndarray) -> None:
        for f, (tab, idx) in enumerate(sources):
            n = len(idx)
            if n == 0 or not tab._track:
                continue
            buf = _owned_grad_buffer(tab)
            contrib = g[f] * (1.0 / n)
            for i in idx:
                buf[i] += contrib

    return make_op(out, tuple(t for t, _ in sources), bwd)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Fused linear -> relu -> linear (one tape node; same math as composing ops)."""
    if x.data.shape[1] != w1.data.shape[0]:
        raise ShapeError(f"mlp2: input {x.shape} does not match first weight {w1.shape}")
    if w1.data.shape[1] != w2.data.shape[0]:
        raise ShapeError(f"mlp2: weights {w1.shape} and {w2.shape} do not chain")
    h_pre = x.data @ w1.data + b1.data
    h = np.maximum(h_pre, 0)
    out = h @ w2.data + b2.data

    def bwd(g: np.ndarray) -> None:
        if w2._track:
            _accum(w2, h.T @ g)
        if b2._track:
            _accum(b2, g.sum(axis=0, keepdims=True))
        gh = (g @ w2.data.T) * (h_pre > 0)
        if x._track:
            _accum(x, gh @ w1.data.T)
        if w1._track:
            _accum(w1, x.data.T @ gh)
        if b1._track:
            _accum(b1, gh.sum(axis=0, keepdims=True))

    return make_op(out, (x, w1, b1, w2, b2), bwd)


def mm_relu_mm(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Fused (x @ w1) -> relu -> (@ w2), no biases (one tape node)."""
    if x.data.shape[1] != w1.data.shape[0] or w1.data.shape[1] != w2.data.shape[0]:
        raise ShapeError(f"mm_relu_mm: {x.shape} / {w1.shape} / {w2.shape} do not chain")
    h_pre = x.data @ w1.data
    h = np.maximum(h_pre, 0)
    out = h @ w2.data

    def bwd(g: np.ndarray) -> None:
        if w2._track:
            _accum(w2, h.T @ g)
        gh = (g @ w2.data.T) * (h_pre > 0)
        if x._track:
            _accum(x, gh @ w1.data.T)
        if w1._track:
            _accum(w1, x.data.T @ gh)

    return make_op(out, (x, w1, w2), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if x._track:
            _accum(x, np.full_like(x.data, g[0, 0]))

    return make_op(x.data.sum(dtype=x.data.dtype).reshape(1, 1), (x,), bwd)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free elementwise logistic."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def weighted_bce_mean(
    logits: Tensor,
    labels: Tensor,
    task_weights: Tensor,
    clamp: float = 1e-7,
) -> Tensor:
    """Batch mean of per-task-weighted binary cross entropy on sigmoid(logits).

    Probabilities are clamped to [clamp, 1-clamp]; the gradient is zero in
    the clamped region (the clamped loss really is flat there).
    """
    if logits.data.shape != labels.data.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs labels {labels.shape}")
    n, t = logits.data.shape
    if task_weights.data.shape != (1, t):
        raise ShapeError(f"loss: task weights {task_weights.shape} need shape (1, {t})")
    y = labels.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("loss: labels must be binary")
    if np.any(task_weights.data <= 0):
        raise ValueError("loss: task weights must be positive")
    p = stable_sigmoid(logits.data)
    pc = np.clip(p, clamp, 1.0 - clamp)
    per = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    val = (per * task_weights.data).sum(axis=1).mean(dtype=logits.data.dtype)

    def bwd(g: np.ndarray) -> None:
        if logits._track:
            inside = (p > clamp) & (p < 1.0 - clamp)
            dz = np.where(inside, p - y, 0.0) * task_weights.data * (g[0, 0] / n)
            _accum(logits, dz.astype(logits.data.dtype, copy=False))

    return make_op(np.asarray(val).reshape(1, 1), (logits, labels, task_weights), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor, params: Iterable[Tensor] | None = None):
    """Reverse sweep from a scalar loss; fills .grad on reachable tensors.

    Call `tape_clear` (or `zero_grads`) between independent graphs; grads
    accumulate additively across calls. When `params` is given, returns a
    mapping from each parameter tensor to its gradient array.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
    _accum(loss, np.ones((1, 1), dtype=loss.data.dtype))
    for node in reversed(_tape):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    if params is not None:
        return {p: p.grad for p in params}
    return None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
        p._grad_owned = False


def _reduction_coeffs(shape: tuple[int, int]) -> np.ndarray:
    # Fixed pseudo-random weights so elementwise gradient errors cannot
    # cancel under a plain sum.
    rng = np.random.Generator(np.random.PCG64(0x5EED))
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between backward grads and central differences.

    `fn` must be pure. The point is evaluated in float64 so the difference
    quotient is trustworthy; fp32 constants inside `fn` cancel exactly
    between the two perturbed evaluations.
    """
    base = point.data.astype(np.float64)
    coeffs = None

    def scalarize(t: Tensor) -> tuple[Tensor, np.ndarray]:
        nonlocal coeffs
        if coeffs is None:
            coeffs = _reduction_coeffs(t.data.shape)
        return sum_all(mul(t, Tensor(coeffs))), coeffs

    start = len(_tape)
    x = Tensor(base.copy(), requires_grad=True)
    loss, coeffs = scalarize(fn(x))
    backward(loss)
    if x.grad is None:
        analytic = np.zeros_like(base)
    else:
        analytic = x.grad.astype(np.float64, copy=True)
    for node in _tape[start:]:
        node.grad = None
        if node._parents:
            for p in node._parents:
                p.grad = None
                p._grad_owned = False
    del _tape[start:]
    x.grad = None

    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                per = base.copy()
                per[i, j] += eps
                fp = float((fn(Tensor(per)).data * coeffs).sum())
                per[i, j] -= 2.0 * eps
                fm = float((fn(Tensor(per)).data * coeffs).sum())
                numeric[i, j] = (fp - fm) / (2.0 * eps)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise FloatingPointError("grad_check: non-finite gradient encountered")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def promote_to_float64(params: Iterable[Tensor]) -> None:
    """Swap parameter storage to float64 in place (gradient-checker aid)."""
    for p in params:
        p.data = p.data.astype(np.float64)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-3,
    samples_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Finite-difference check of d loss / d theta on sampled coordinates.

    Parameters should be promoted to float64 first (`promote_to_float64`);
    `loss_fn` rebuilds the graph from the live parameter tensors each call.
    """
    rng = np.random.Generator(np.random.PCG64(seed))

    tape_clear()
    zero_grads(params.values())
    loss = loss_fn()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    tape_clear()
    zero_grads(params.values())

    worst = 0.0
    with no_grad():
        for name, p in sorted(params.items()):
            size = p.data.size
            count = min(samples_per_param, size)
            coords = rng.choice(size, size=count, replace=False)
            flat = p.data.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = loss_fn().item()
                flat[c] = orig - eps
                fm = loss_fn().item()
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * eps)
                ana = float(analytic[name].reshape(-1)[c])
                err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
