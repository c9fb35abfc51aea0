"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the model: broadcast-aware elementwise ops,
(batched) matmul, reductions, reshape/transpose/concat, and fused softmax.
Gradients accumulate into `grad` buffers; `backward()` walks a topological
order of the tape.  Dtype follows the data (float32 for training, float64
for finite-difference checks).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing broadcast dimensions."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        for t in topo:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        self.grad = self.grad + np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    def _accum(self, grad):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad += grad

    # -- elementwise ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bwd(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        out._backward = bwd if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = (lambda g: self._accum(-g)) if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bwd(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        out._backward = bwd if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bwd(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        out._backward = bwd if out.requires_grad else None
        return out

    def __pow__(self, exponent: float):
        out = Tensor(self.data**exponent, parents=(self,))

        def bwd(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        out._backward = bwd if out.requires_grad else None
        return out

    def exp(self):
        value = np.exp(self.data)
        out = Tensor(value, parents=(self,))
        out._backward = (lambda g: self._accum(g * value)) if out.requires_grad else None
        return out

    def sqrt(self):
        return self**0.5

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data @ other.data, parents=(self, other))

        def bwd(g):
            a, b = self.data, other.data
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            self._accum(_unbroadcast(ga, self.shape))
            other._accum(_unbroadcast(gb, other.shape))

        out._backward = bwd if out.requires_grad else None
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))
        out._backward = (lambda g: self._accum(g.reshape(self.shape))) if out.requires_grad else None
        return out

    def transpose(self, *axes):
        inverse = np.argsort(axes)
        out = Tensor(self.data.transpose(*axes), parents=(self,))
        out._backward = (lambda g: self._accum(g.transpose(*inverse))) if out.requires_grad else None
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        out._backward = bwd if out.requires_grad else None
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        out._backward = bwd if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims=False):
        size = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(size)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None and arr.dtype != dtype and np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(dtype)
    elif np.isscalar(value) and dtype is not None:
        arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Nonlinearities and fused ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    out = Tensor(np.where(keep, x.data, 0.0), parents=(x,))
    out._backward = (lambda g: x._accum(g * keep)) if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    value = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(value, parents=(x,))
    out._backward = (lambda g: x._accum(g * value * (1.0 - value))) if out.requires_grad else None
    return out


def softmax_last(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(value, parents=(x,))

    def bwd(g):
        dot = (g * value).sum(axis=-1, keepdims=True)
        x._accum(value * (g - dot))

    out._backward = bwd if out.requires_grad else None
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    out._backward = bwd if out.requires_grad else None
    return out


def where_mask(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """x where mask else constant fill; gradient flows only through kept slots."""
    keep = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(keep, x.data, fill), parents=(x,))
    out._backward = (lambda g: x._accum(g * keep)) if out.requires_grad else None
    return out


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient routed to the first argmax along the axis."""
    value = x.data.max(axis=axis)
    out = Tensor(value, parents=(x,))

    def bwd(g):
        idx = x.data.argmax(axis=axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        x._accum(full)

    out._backward = bwd if out.requires_grad else None
    return out
