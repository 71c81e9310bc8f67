"""Dense float64 tensors with reverse-mode differentiation.

Each op builds its output with a closure that pushes the output gradient to
its inputs. ``backward`` walks the graph in reverse topological order and
then releases it, so a second call on the same loss fails loudly.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it, then free the graph."""
    if loss._released:
        raise RuntimeError("backward called twice on the same graph; run the forward pass again")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any parameter")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node._released = True
            if node is not loss:
                node.grad = None


# --
# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(data, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        data = 1.0 / a.data
    return _make(data, (a,), "reciprocal", lambda g: _accumulate(a, -g * data * data))


def power(a: Tensor, k: float) -> Tensor:
    data = a.data ** k
    return _make(data, (a,), "power", lambda g: _accumulate(a, g * k * a.data ** (k - 1)))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), "exp", lambda g: _accumulate(a, g * data))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), "log", lambda g: _accumulate(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(data > 0, 0.5 / data, 0.0)
        _accumulate(a, g * d)
    return _make(data, (a,), "sqrt", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accumulate(a, g * mask))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """max(0, x) + slope * min(0, x); ``slope`` broadcasts over rows."""
    pos = a.data > 0
    data = np.where(pos, a.data, slope.data * a.data)

    def bw(g):
        _accumulate(a, g * np.where(pos, 1.0, slope.data))
        _accumulate(slope, _unbroadcast(g * np.where(pos, 0.0, a.data), slope.shape))
    return _make(data, (a, slope), "prelu", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(data, (a,), "sigmoid", lambda g: _accumulate(a, g * data * (1.0 - data)))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated stably."""
    data = np.logaddexp(0.0, a.data)

    def bw(g):
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, g * sig)
    return _make(data, (a,), "softplus", bw)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(data, (a,), "clamp", lambda g: _accumulate(a, g * inside))


def maximum(a: Tensor, floor) -> Tensor:
    """Elementwise max against a constant (array or scalar); gradient flows where a wins."""
    floor = np.asarray(floor, dtype=np.float64)
    wins = a.data >= floor
    data = np.where(wins, a.data, floor)
    return _make(data, (a,), "maximum", lambda g: _accumulate(a, g * wins))


# --
# Linear algebra and reshaping

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(data, (a, b), "matmul", bw)


def spmm(m: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor; the sparse operand gets no gradient."""
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {m.shape} and {x.shape}")
    data = np.asarray(m @ x.data)
    mt = m.T.tocsr()
    return _make(data, (x,), "spmm", lambda g: _accumulate(x, np.asarray(mt @ g)))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), "transpose", lambda g: _accumulate(a, g.T))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        _accumulate(a, out)
    return _make(data, (a,), "take_rows", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))
    return _make(data, tensors, "concat", bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _make(np.asarray(data), (a,), "sum", bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` grouped by integer segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    data = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(data, segments, a.data)
    return _make(data, (a,), "segment_sum", lambda g: _accumulate(a, g[segments]))


# --
# Composite primitives

def masked_logsumexp(a: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """log sum_{mask} exp(a) along ``axis``; every slice needs >= 1 selected entry."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_logsumexp: mask {mask.shape} vs values {a.shape}")
    if not np.all(mask.any(axis=axis)):
        raise ValueError("masked_logsumexp: a slice has no selected entries")
    x = np.where(mask, a.data, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    w = np.exp(x - m)
    s = w.sum(axis=axis, keepdims=True)
    data = (np.log(s) + m).squeeze(axis)
    soft = w / s

    def bw(g):
        _accumulate(a, np.expand_dims(g, axis) * soft)
    return _make(data, (a,), "masked_logsumexp", bw)


def l2_row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = a.data / norms

    def bw(g):
        _accumulate(a, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)
    return _make(y, (a,), "l2_row_normalize", bw)


def row_distances(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance matrix between rows of ``a`` and rows of ``b``."""
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d > 0, g / d, 0.0)
        contrib = coef[:, :, None] * diff
        _accumulate(a, contrib.sum(axis=1))
        _accumulate(b, -contrib.sum(axis=0))
    return _make(d, (a, b), "row_distances", bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize columns with batch statistics, then scale and shift."""
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data
    n = x.shape[0]

    def bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=0, keepdims=True).reshape(gamma.shape))
        _accumulate(beta, g.sum(axis=0, keepdims=True).reshape(beta.shape))
        gx = g * gamma.data
        _accumulate(x, inv / n * (n * gx - gx.sum(axis=0, keepdims=True)
                                  - xhat * (gx * xhat).sum(axis=0, keepdims=True)))
    return _make(data, (x, gamma, beta), "batch_norm", bw)
