"""Dense float32 tensors with a single-use reverse-mode tape.

Every forward op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating bad values.  Ops that reduce
over a sequence axis (attention products, softmax normalisers) use
accumulation orders that do not depend on how many trailing positions are
present, so a prefix of a sequence produces bitwise the same activations
whether or not later positions exist.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e9
IGNORE_INDEX = -100

_grad_enabled = contextvars.ContextVar("sqlf_grad_enabled", default=True)
_default_dtype = contextvars.ContextVar("sqlf_default_dtype", default=np.float32)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording a tape (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the float type used for new tensors.

    float32 is the working precision; float64 exists so gradient checks can
    use finite differences without float32 cancellation noise.
    """
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def get_default_dtype():
    return _default_dtype.get()


class TapeNode:
    __slots__ = ("op_kind", "inputs", "backward_fn", "consumed")

    def __init__(self, op_kind: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op_kind = op_kind
        self.inputs = inputs
        # closure over the saved activations; dropped once backward has run
        self.backward_fn = backward_fn
        self.consumed = False

    def free(self) -> None:
        self.consumed = True
        self.inputs = ()
        self.backward_fn = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = dtype or _default_dtype.get()
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _result(arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.reshape((-1,) + grad.shape[lead:]).sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _seq_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    # strictly left-to-right, so trailing zeros never regroup the sum
    return np.take(np.cumsum(x, axis=axis), [-1], axis=axis)


def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # contiguous operands keep einsum on the same inner loop whatever the strides
    return np.einsum("...ik,...kj->...ij", np.ascontiguousarray(a), np.ascontiguousarray(b))


def _mm2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # numpy routes single-row products to gemv, which rounds differently
    # from gemm; pad to two rows so row results never depend on row count
    if a.shape[0] == 1:
        return np.matmul(np.concatenate([a, a]), b)[:1]
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, b)
    if isinstance(a, (int, float)):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(x.data * c, "scale", (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * dinner
        return (g * d,)

    return _result(out, "gelu", (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), bw)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(tuple(shape)), "reshape", (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions (if any) are batch dimensions.

    2-D products go through BLAS.  Batched products use a plain einsum,
    which keeps each output element's accumulation order independent of
    the sizes of the other axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim == 2:
        out = _mm2d(a.data, b.data)

        def bw(g):
            return _mm2d(g, b.data.T), _mm2d(a.data.T, g)

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
        out = _bmm(a.data, b.data)

        def bw(g):
            return _bmm(g, np.swapaxes(b.data, -1, -2)), _bmm(np.swapaxes(a.data, -1, -2), g)

    return _result(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = _mm2d(x2, weight.data)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = _mm2d(g2, weight.data.T).reshape(x.shape)
        gw = _mm2d(x2.T, g2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "linear", inputs, bw)


# ---------------------------------------------------------------------------
# normalisation / attention
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / _seq_sum(e, axis=axis)

    def bw(g):
        return (p * (g - _seq_sum(g * p, axis=axis)),)

    return _result(p, "softmax", (x,), bw)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis after adding an additive mask.

    ``mask`` holds 0 for visible entries and ``MASK_VALUE`` for hidden ones
    and must broadcast against ``scores``.  A row with nothing visible has
    no valid attention target and raises ``ValueError``.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    hidden = np.broadcast_to(m <= MASK_VALUE / 2, scores.shape)
    if hidden.all(axis=-1).any():
        raise ValueError("masked_softmax: a row is fully masked (no valid attention target)")
    s = scores.data + m.astype(scores.dtype)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / _seq_sum(e)

    def bw(g):
        return (p * (g - _seq_sum(g * p)),)

    return _result(p, "masked_softmax", (scores,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        g2 = g.reshape(-1, d)
        dgain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        dbias = g2.sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _result(out, "layer_norm", (x, gain, bias), bw)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding_lookup: ids out of range [0, {n})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], "embedding", (weight,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _result(x.data * keep, "dropout", (x,), bw)


def cross_entropy_masked(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean NLL over positions whose label is not ``ignore_index``.

    ``logits`` has shape (..., V) and ``labels`` the matching leading shape.
    Ignored positions contribute neither loss nor gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    v = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_masked: labels {labels.shape} vs logits {logits.shape}")
    flat = logits.data.reshape(-1, v)
    lab = labels.reshape(-1)
    keep = lab != ignore_index
    bad = keep & ((lab < 0) | (lab >= v))
    if bad.any():
        raise IndexError(f"cross_entropy_masked: label out of range [0, {v})")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy_masked: no supervised positions")
    rows = np.flatnonzero(keep)
    sel = flat[rows]
    mx = sel.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(sel - mx).sum(axis=-1, keepdims=True))
    logp = sel - lse
    nll = -logp[np.arange(count), lab[rows]]
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = np.zeros_like(flat)
        p = np.exp(logp)
        p[np.arange(count), lab[rows]] -= 1.0
        grad[rows] = p * (g / count)
        return (grad.reshape(logits.shape),)

    return _result(loss, "cross_entropy", (logits,), bw)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array log-softmax for decoding (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    mx = x.max(axis=axis, keepdims=True)
    return x - mx - np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            if t.node.consumed:
                raise TapeError("backward: graph already consumed; run the forward pass again")
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    The tape is freed afterwards; calling this twice on the same graph raises
    :class:`TapeError`.
    """
    if not root.requires_grad:
        raise TapeError("backward: root does not require grad")
    if root.node is not None and root.node.consumed:
        raise TapeError("backward: graph already consumed; run the forward pass again")
    if grad is None:
        if root.data.size != 1:
            raise TapeError("backward: non-scalar root needs an explicit gradient")
        grad = np.ones_like(root.data)
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if t.node is None:
            if g is not None:
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        if g is None:
            t.node.free()
            continue
        in_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        t.node.free()
