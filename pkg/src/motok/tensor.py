"""Reverse-mode automatic differentiation over numpy arrays.

Each op records a backward closure on its output; ``backward(loss)``
topologically sorts the recorded graph and accumulates dLoss/dX into
``Tensor.grad``. Gradients accumulate across calls until ``zero_grad``.

float32 is the training dtype. Ops propagate the input dtype unchanged,
so tests can run their finite-difference oracles in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

# Debug hook: when enabled, every op output is checked for non-finite values.
DEBUG_NAN = False

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            # copy: the same array object may be routed to several parents
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g
        if DEBUG_NAN and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient")

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build a graph node. ``backward(g)`` must accumulate into the parents."""
    if DEBUG_NAN and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite op output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._parents = ()
    out.requires_grad = False
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad or p._backward is not None)
        if live:
            out.requires_grad = True
            out._backward = backward
            out._parents = live
    return out


def backward(loss: Tensor):
    """Accumulate dLoss/dX for every tensor reachable from ``loss``."""
    if loss._backward is None and not loss.requires_grad:
        raise UsageError("backward() called on a tensor with no recorded graph")
    if loss.data.size != 1:
        raise ShapeError("backward() expects a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # free intermediate grads; leaves keep theirs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return make_op(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(-_unbroadcast(g, b.data.shape))

    return make_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return make_op(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def bw(g):
        a.accumulate(g * a.data.dtype.type(s))

    return make_op(data, (a,), bw)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(g):
        a.accumulate(g * (2.0 * a.data))

    return make_op(data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires ndim >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.data.ndim == 2 and a.data.ndim > 2:
            # one flat GEMM instead of a stacked product plus reduction
            k, m = b.data.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            b.accumulate(gb)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return make_op(data, (a, b), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return make_op(data, (a,), bw)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        a.accumulate(g.reshape(a.data.shape))

    return make_op(data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        a.accumulate(g.transpose(inv))

    return make_op(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return make_op(data, tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate(full)

    return make_op(data, (a,), bw)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    idx = np.asarray(indices)
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table.accumulate(gt)

    return make_op(data, (table,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to inf and 1/(1+inf) == 0,
    # which is the correct limit; silence the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    data = a.data * s

    def bw(g):
        a.accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    return make_op(data, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (the variant used by the ablation switch)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return make_op(data, (a,), bw)


def softmax(a: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``bias`` is an additive constant
    (e.g. -inf attention mask) that receives no gradient."""
    x = a.data if bias is None else a.data + bias
    x = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(x)
    s = ex / ex.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        a.accumulate(s * (g - dot))

    return make_op(s, (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, reduce: str = "mean") -> Tensor:
    """Per-position NLL of ``targets`` under softmax(logits[..., V])."""
    t = np.asarray(targets)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, t[..., None], axis=-1)[..., 0]
    nll = lse - picked
    n = nll.size

    def soft_minus_onehot():
        soft = np.exp(x - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        flat = soft.reshape(-1, x.shape[-1])
        flat[np.arange(flat.shape[0]), t.reshape(-1)] -= 1.0
        return soft

    if reduce == "none":

        def bw_none(g):
            logits.accumulate(soft_minus_onehot() * g[..., None])

        return make_op(nll, (logits,), bw_none)

    total = nll.sum()
    value = total / n if reduce == "mean" else total

    def bw(g):
        w = g / n if reduce == "mean" else g
        logits.accumulate(soft_minus_onehot() * w)

    return make_op(np.asarray(value, dtype=x.dtype), (logits,), bw)


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean Huber loss with transition point 1.0."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tgt.shape:
        raise ShapeError(f"smooth_l1: {pred.data.shape} vs {tgt.shape}")
    e = pred.data - tgt
    ae = np.abs(e)
    quad = ae < 1.0
    vals = np.where(quad, 0.5 * e * e, ae - 0.5)
    n = vals.size

    def bw(g):
        de = np.where(quad, e, np.sign(e))
        pred.accumulate(de * (g / n))

    return make_op(np.asarray(vals.mean(), dtype=pred.data.dtype), (pred,), bw)


def straight_through(src: Tensor, value) -> Tensor:
    """Forward the quantized ``value``; pass the gradient to ``src`` unchanged."""
    val = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=src.data.dtype)
    if val.shape != src.data.shape:
        raise ShapeError(f"straight_through: {src.data.shape} vs {val.shape}")

    def bw(g):
        src.accumulate(g)

    return make_op(val, (src,), bw)
