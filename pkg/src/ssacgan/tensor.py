"""Reverse-mode autodiff over float32 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, when any input requires a
gradient, remembers its parents plus a closure mapping the output gradient to
the parents' gradients.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into the ``grad`` buffers of leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf values reach a checked boundary."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not _parents:
            check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- differentiation --------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Gradients accumulate across calls; callers reset between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output; records the graph only when a parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise / reduction ops -------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return make_result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return make_result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a: Tensor) -> Tensor:
    return make_result(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE), (a,),
                       lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(np.asarray(a.data.mean(dtype=np.float64), dtype=DTYPE), (a,),
                       lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(DTYPE), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    scale = np.where(a.data > 0, 1.0, slope).astype(DTYPE)
    return make_result(a.data * scale, (a,), lambda g: (g * scale,))


_TANH_BOUND = np.nextafter(DTYPE(1.0), DTYPE(0.0))


def tanh(a: Tensor) -> Tensor:
    # float32 tanh saturates to +-1.0 exactly; keep outputs strictly inside.
    y = np.clip(np.tanh(a.data), -_TANH_BOUND, _TANH_BOUND)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),))


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")
