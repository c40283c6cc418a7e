"""Reverse-mode autodiff over float64 numpy arrays.

A ``Var`` wraps one array plus a backward closure; ops build a graph that
``backward()`` walks once in reverse topological order.  Graphs are single
use: build, run backward, discard.  Gradients accumulate additively, so the
caller zeroes parameter gradients between batches.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Var:
    """Graph node: value ``data``, gradient buffer ``grad`` (lazy)."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    # make numpy defer to our reflected operators instead of building
    # object arrays when an ndarray sits on the left
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), backward=None):
        self.data = as_array(data)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and propagate to every ancestor."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar root")
        topo: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Var) else -as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data, (a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.data * b.data, (a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.data / b.data, (a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bwd
    return out


def powc(a, p: float) -> Var:
    """a ** p for a constant exponent p."""
    a = as_var(a)
    out = Var(a.data ** p, (a,))

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1))

    out._backward = bwd
    return out


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.data @ b.data, (a, b))

    def bwd(g):
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            a._accumulate(g * B)
            b._accumulate(g * A)
        elif A.ndim == 1:
            a._accumulate(B @ g)
            b._accumulate(np.outer(A, g))
        elif B.ndim == 1:
            if A.ndim != 2:
                raise ValueError("matmul backward: unsupported operand ranks")
            a._accumulate(np.outer(g, B))
            b._accumulate(A.T @ g)
        else:
            a._accumulate(_unbroadcast(g @ _swap(B), A.shape))
            b._accumulate(_unbroadcast(_swap(A) @ g, B.shape))

    out._backward = bwd
    return out


def take(a: Var, key) -> Var:
    """a[key] with scatter-add backward."""
    out = Var(a.data[key], (a,))

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, key, g)

    out._backward = bwd
    return out


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = Var(a.data.reshape(shape), (a,))

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    out._backward = bwd
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Var:
    a = as_var(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    out = Var(np.transpose(a.data, axes), (a,))

    def bwd(g):
        a._accumulate(np.transpose(g, inv))

    out._backward = bwd
    return out


def t2(a) -> Var:
    """Swap the last two axes."""
    a = as_var(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    out._backward = bwd
    return out


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = Var(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    count = a.data.size / out.data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.data.shape))

    out._backward = bwd
    return out


def stack(vars_: Iterable, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vars_]
    out = Var(np.stack([v.data for v in vs], axis=axis), tuple(vs))

    def bwd(g):
        for i, v in enumerate(vs):
            v._accumulate(np.take(g, i, axis=axis))

    out._backward = bwd
    return out


def concat(vars_: Iterable, axis: int = -1) -> Var:
    vs = [as_var(v) for v in vars_]
    out = Var(np.concatenate([v.data for v in vs], axis=axis), tuple(vs))
    sizes = [v.data.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for v, piece in zip(vs, np.split(g, splits, axis=axis)):
            v._accumulate(piece)

    out._backward = bwd
    return out


# -- nonlinearities ---------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    y = _sigmoid(a.data)
    out = Var(y, (a,))

    def bwd(g):
        a._accumulate(g * y * (1.0 - y))

    out._backward = bwd
    return out


def tanh(a) -> Var:
    a = as_var(a)
    y = np.tanh(a.data)
    out = Var(y, (a,))

    def bwd(g):
        a._accumulate(g * (1.0 - y * y))

    out._backward = bwd
    return out


def exp(a) -> Var:
    a = as_var(a)
    y = np.exp(a.data)
    out = Var(y, (a,))

    def bwd(g):
        a._accumulate(g * y)

    out._backward = bwd
    return out


def log(a) -> Var:
    a = as_var(a)
    out = Var(np.log(a.data), (a,))

    def bwd(g):
        a._accumulate(g / a.data)

    out._backward = bwd
    return out


def sqrt(a) -> Var:
    a = as_var(a)
    y = np.sqrt(a.data)
    out = Var(y, (a,))

    def bwd(g):
        a._accumulate(g * 0.5 / y)

    out._backward = bwd
    return out


def relu(a) -> Var:
    a = as_var(a)
    out = Var(np.maximum(a.data, 0.0), (a,))

    def bwd(g):
        a._accumulate(g * (a.data > 0))

    out._backward = bwd
    return out


def softplus(a) -> Var:
    """log(1 + exp(x)), computed without overflow."""
    a = as_var(a)
    out = Var(np.logaddexp(0.0, a.data), (a,))

    def bwd(g):
        a._accumulate(g * _sigmoid(a.data))

    out._backward = bwd
    return out


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values to [lo, hi]; gradient passes only inside the range."""
    a = as_var(a)
    out = Var(np.clip(a.data, lo, hi), (a,))

    def bwd(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    out._backward = bwd
    return out


# -- attention / normalization primitives -----------------------------------


def softmax(scores, mask=None, axis: int = -1) -> Var:
    """Max-shifted softmax along ``axis``.

    ``mask`` is an optional boolean keep-mask broadcastable to the scores;
    excluded positions come out exactly 0 and pass no gradient.  Raises if a
    slice has no kept position.
    """
    a = as_var(scores)
    x = a.data
    if mask is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not keep.any(axis=axis).all():
            raise ValueError("empty attention support")
        neg = np.where(keep, x, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        e = np.exp(neg - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y, (a,))

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    out._backward = bwd
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gn, bs = as_var(x), as_var(gain), as_var(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Var(gn.data * xhat + bs.data, (a, gn, bs))

    def bwd(g):
        gg = g * gn.data
        ga = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        a._accumulate(ga)
        lead = tuple(range(g.ndim - gn.data.ndim))
        gn._accumulate(_unbroadcast((g * xhat).sum(axis=lead) if lead else g * xhat,
                                    gn.data.shape))
        bs._accumulate(_unbroadcast(g.sum(axis=lead) if lead else g, bs.data.shape))

    out._backward = bwd
    return out
