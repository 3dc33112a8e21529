"""Minimal dense-tensor engine with taped reverse-mode differentiation.

Tensors wrap NumPy arrays (float32 by default, float64 for verification
runs) and are immutable after construction. Tracing is explicit: leaves
registered on a GradTape participate in differentiation, everything else
is a constant. Ops append adjoint closures to the tape in forward
execution order; ``backward`` replays them in exact reverse order, so a
single evaluation order gives bit-identical gradients across runs.

Every op validates that its output is finite and raises NonFiniteError
otherwise; NaN/Inf is never allowed to propagate silently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import FullyMaskedRowError, NonFiniteError

__all__ = [
    "Tensor",
    "GradTape",
    "AttentionMask",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "gather_rows",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "tsum",
    "mean",
    "sqrt",
    "exp",
    "log",
    "absolute",
    "relu",
    "tanh",
    "gelu",
    "layer_norm",
    "masked_softmax",
    "dot",
    "l2norm",
    "cosine",
    "normalize",
    "detach",
    "backward",
    "grad_check",
]


class Tensor:
    """Immutable dense array, optionally attached to a GradTape."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None, dtype=None):
        if dtype is None and not (
            isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        ):
            dtype = np.float32
        arr = np.array(data, dtype=dtype)  # owned copy; tensors are immutable
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Arithmetic operators; raw scalars/arrays are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class GradTape:
    """Ordered record of primitive ops, replayed backwards for adjoints."""

    def __init__(self):
        self._ops: list[Callable[[dict], None]] = []
        self._params: list[Tensor] = []

    def param(self, data, dtype=None) -> Tensor:
        """Register a differentiable leaf on this tape."""
        t = Tensor(data, tape=self, dtype=dtype)
        self._params.append(t)
        return t

    def watch(self, t: Tensor) -> Tensor:
        """Re-register an existing array as a leaf of this tape."""
        return self.param(t.data if isinstance(t, Tensor) else t)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar loss for every registered leaf.

        Leaves that do not reach the loss get exact zeros.
        """
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise ValueError("backward requires a scalar tensor produced under tracing")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for op in reversed(self._ops):
            op(grads)
        out: dict[Tensor, np.ndarray] = {}
        for p in self._params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g)
        return out


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


class AttentionMask:
    """Boolean matrix; entry (i, j) true means query i may attend to key j.

    Construction rejects masks with a fully-false row: such a row would
    make a softmax row undefined, which always indicates a mask bug.
    """

    __slots__ = ("allowed",)

    def __init__(self, allowed):
        arr = np.asarray(allowed, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if not arr.any(axis=1).all():
            raise FullyMaskedRowError("attention mask has a row with no allowed keys")
        arr.setflags(write=False)
        self.allowed = arr

    @property
    def shape(self):
        return self.allowed.shape

    @staticmethod
    def full(rows: int, cols: int) -> "AttentionMask":
        return AttentionMask(np.ones((rows, cols), dtype=bool))


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(arr: np.ndarray, where: str):
    # a single reduction: any NaN/Inf makes the sum non-finite
    if not math.isfinite(float(arr.sum())):
        raise NonFiniteError(f"non-finite value in {where}")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result_tape(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("cannot combine tensors from different tapes")
    return tape


def _make(data: np.ndarray, tape: GradTape | None, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    data.setflags(write=False)
    out.data = data
    out.tape = tape
    return out


def _acc(grads: dict, t: Tensor, value: np.ndarray):
    if t.tape is None:
        return
    key = id(t)
    g = grads.get(key)
    if g is None:
        grads[key] = value
    else:
        grads[key] = g + value


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcasted axes so g matches the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    tape = _result_tape(a, b)
    out = _make(a.data + b.data, tape, "add")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            _acc(grads, a, _unbroadcast(g, a.data.shape))
            _acc(grads, b, _unbroadcast(g, b.data.shape))

        tape._ops.append(_bwd)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    tape = _result_tape(a, b)
    out = _make(a.data - b.data, tape, "sub")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            _acc(grads, a, _unbroadcast(g, a.data.shape))
            _acc(grads, b, _unbroadcast(-g, b.data.shape))

        tape._ops.append(_bwd)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    tape = _result_tape(a, b)
    out = _make(a.data * b.data, tape, "mul")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            _acc(grads, a, _unbroadcast(g * b.data, a.data.shape))
            _acc(grads, b, _unbroadcast(g * a.data, b.data.shape))

        tape._ops.append(_bwd)
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    tape = _result_tape(a, b)
    out = _make(a.data / b.data, tape, "div")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            _acc(grads, a, _unbroadcast(g / b.data, a.data.shape))
            _acc(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        tape._ops.append(_bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out = _make(-a.data, tape, "neg")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is not None:
                _acc(grads, a, -g)

        tape._ops.append(_bwd)
    return out


def _unary(a, fn, dfn, name) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out = _make(fn(a.data), tape, name)

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is not None:
                _acc(grads, a, g * dfn(a.data, out.data))

        tape._ops.append(_bwd)
    return out


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def absolute(a) -> Tensor:
    # subgradient 0 at x == 0
    return _unary(a, np.abs, lambda x, y: np.sign(x), "abs")


def relu(a) -> Tensor:
    # subgradient 0 at the hinge point
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype), "relu")


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Smooth tanh-form gelu; smoothness keeps finite-difference checks tight."""
    a = _as_tensor(a)
    tape = a.tape
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    out = _make(0.5 * x * (1.0 + t), tape, "gelu")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            _acc(grads, a, g * d)

        tape._ops.append(_bwd)
    return out


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives


def matmul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    tape = _result_tape(a, b)
    out = _make(a.data @ b.data, tape, "matmul")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            _acc(grads, a, g @ b.data.T)
            _acc(grads, b, a.data.T @ g)

        tape._ops.append(_bwd)
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    tape = a.tape
    out = _make(np.ascontiguousarray(a.data.T), tape, "transpose")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is not None:
                _acc(grads, a, g.T)

        tape._ops.append(_bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out = _make(a.data.reshape(shape).copy(), tape, "reshape")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is not None:
                _acc(grads, a, g.reshape(a.data.shape))

        tape._ops.append(_bwd)
    return out


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    tape = a.tape
    out = _make(a.data[idx].copy(), tape, "gather_rows")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _acc(grads, a, acc)

        tape._ops.append(_bwd)
    return out


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out = _make(a.data[start:stop].copy(), tape, "slice_rows")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            acc = np.zeros_like(a.data)
            acc[start:stop] = g
            _acc(grads, a, acc)

        tape._ops.append(_bwd)
    return out


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    tape = a.tape
    out = _make(a.data[:, start:stop].copy(), tape, "slice_cols")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            acc = np.zeros_like(a.data)
            acc[:, start:stop] = g
            _acc(grads, a, acc)

        tape._ops.append(_bwd)
    return out


def _concat(tensors: Sequence, axis: int, name: str) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError(f"{name} of an empty list")
    tape = _result_tape(*ts)
    out = _make(np.concatenate([t.data for t in ts], axis=axis), tape, name)

    if tape is not None:
        sizes = [t.data.shape[axis] for t in ts]

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            offset = 0
            for t, size in zip(ts, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                _acc(grads, t, g[tuple(sl)])
                offset += size

        tape._ops.append(_bwd)
    return out


def concat_rows(tensors) -> Tensor:
    return _concat(tensors, 0, "concat_rows")


def concat_cols(tensors) -> Tensor:
    return _concat(tensors, 1, "concat_cols")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    tape = a.tape
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), tape, "sum")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(grads, a, np.broadcast_to(g, a.data.shape).copy())

        tape._ops.append(_bwd)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization and attention primitives


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    tape = _result_tape(x, gamma, beta)

    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = _make(xhat * gamma.data + beta.data, tape, "layer_norm")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            axes = tuple(range(g.ndim - 1))
            _acc(grads, gamma, (g * xhat).sum(axis=axes).reshape(gamma.data.shape))
            _acc(grads, beta, g.sum(axis=axes).reshape(beta.data.shape))
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(grads, x, inv_std * (dxhat - m1 - xhat * m2))

        tape._ops.append(_bwd)
    return out


def masked_softmax(scores, mask) -> Tensor:
    """Row softmax over unmasked entries; masked entries are exactly zero.

    Stabilized by subtracting the per-row max over unmasked entries. A
    fully-masked row is rejected at mask construction.
    """
    scores = _as_tensor(scores)
    if not isinstance(mask, AttentionMask):
        mask = AttentionMask(mask)
    if scores.data.ndim != 2 or scores.data.shape != mask.shape:
        raise ValueError(f"scores {scores.data.shape} and mask {mask.shape} disagree")
    tape = scores.tape

    allowed = mask.allowed
    shifted = np.where(allowed, scores.data, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    e = np.exp(scores.data - row_max, where=allowed, out=np.zeros_like(scores.data))
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    out = _make(probs, tape, "masked_softmax")

    if tape is not None:

        def _bwd(grads):
            g = grads.get(id(out))
            if g is None:
                return
            inner = (g * probs).sum(axis=1, keepdims=True)
            _acc(grads, scores, probs * (g - inner))

        tape._ops.append(_bwd)
    return out


# ---------------------------------------------------------------------------
# composite vector helpers


def dot(a, b) -> Tensor:
    return tsum(mul(a, b))


def l2norm(a) -> Tensor:
    return sqrt(tsum(mul(a, a)))


def _guard_norm(n: Tensor, what: str):
    if n.item() < 1e-12:
        raise ValueError(f"{what} has near-zero norm; cosine undefined")


def cosine(a, b) -> Tensor:
    """Cosine similarity of two vectors; errors on near-zero norm."""
    na, nb = l2norm(a), l2norm(b)
    _guard_norm(na, "first cosine argument")
    _guard_norm(nb, "second cosine argument")
    return div(dot(a, b), mul(na, nb))


def normalize(a) -> Tensor:
    """a / ||a||_2, with a near-zero-norm guard."""
    n = l2norm(a)
    _guard_norm(n, "normalize argument")
    return div(a, n)


def detach(a: Tensor) -> Tensor:
    """Constant copy of a tensor; gradients stop here."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, points, eps: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` maps one tensor per entry of ``points`` to a scalar tensor. All
    probing runs in float64; relative error per coordinate is
    |a - n| / max(1, |a|, |n|) and the maximum over all coordinates of
    all points is returned.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if isinstance(points, np.ndarray) or np.isscalar(points):
        points = [points]
    arrays = [np.asarray(p, dtype=np.float64) for p in points]

    tape = GradTape()
    leaves = [tape.param(a) for a in arrays]
    loss = f(*leaves)
    analytic = tape.backward(loss)

    def eval_at(arrs) -> float:
        out = f(*[Tensor(a) for a in arrs])
        val = out.item()
        if not math.isfinite(val):
            raise NonFiniteError("non-finite evaluation at finite-difference probe")
        return val

    worst = 0.0
    for li, leaf in enumerate(leaves):
        grad = np.asarray(analytic[leaf], dtype=np.float64).reshape(-1)
        base = arrays[li]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            probe = [a.copy() for a in arrays]
            probe[li].reshape(-1)[i] = orig + eps
            f_plus = eval_at(probe)
            probe[li].reshape(-1)[i] = orig - eps
            f_minus = eval_at(probe)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
