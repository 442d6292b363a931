"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operations needed to compose MLPs and the losses built on top of
them are supported. Broadcasting follows numpy; gradients are reduced back to
the parent's shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-accumulate gradients into every reachable leaf that requires grad."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        out = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return _node(out, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def bw(g):
            self._accumulate(-g)

        return _node(-self.data, (self,), bw)

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        out = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return _node(out, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        out = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out / other.data, other.shape))

        return _node(out, (self, other), bw)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        out = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return _node(out, (self, other), bw)

    def __getitem__(self, idx) -> Tensor:
        out = self.data[idx]

        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            if _needs_add_at(idx):
                np.add.at(self.grad, idx, g)
            else:
                self.grad[idx] += g

        return _node(out, (self,), bw)

    # reductions / shape ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return _node(out, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        out = self.data.reshape(*shape)

        def bw(g):
            self._accumulate(g.reshape(self.shape))

        return _node(out, (self,), bw)

    # elementwise functions -------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out)

        return _node(out, (self,), bw)

    def log(self) -> Tensor:
        def bw(g):
            self._accumulate(g / self.data)

        return _node(np.log(self.data), (self,), bw)

    def square(self) -> Tensor:
        def bw(g):
            self._accumulate(2.0 * g * self.data)

        return _node(self.data * self.data, (self,), bw)

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)

        def bw(g):
            self._accumulate(0.5 * g / out)

        return _node(out, (self,), bw)

    def relu(self) -> Tensor:
        mask = self.data > 0

        def bw(g):
            self._accumulate(g * mask)

        return _node(self.data * mask, (self,), bw)

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)

        def bw(g):
            self._accumulate(g * (1.0 - out * out))

        return _node(out, (self,), bw)

    def softplus(self) -> Tensor:
        x = self.data
        out = np.logaddexp(0.0, x)

        def bw(g):
            self._accumulate(g * _sigmoid(x))

        return _node(out, (self,), bw)

    def clip(self, lo: float, hi: float) -> Tensor:
        """Clamp values; gradient is zero where the clamp is active."""
        mask = (self.data >= lo) & (self.data <= hi)

        def bw(g):
            self._accumulate(g * mask)

        return _node(np.clip(self.data, lo, hi), (self,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out, tuple(tensors), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for a batch ``x`` of shape (B, n_in)."""
    out = x.data @ w.data + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(out, (x, w, b), bw)
