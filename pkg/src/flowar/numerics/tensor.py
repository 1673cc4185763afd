"""Tensor with a reverse-mode gradient tape.

Layout is row-major (numpy C order). Binary ops follow numpy broadcasting:
shapes are right-aligned and a dimension of size 1 stretches to match the
other operand. The backward pass sums gradients over every stretched axis
so that each input receives a gradient of its own shape.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


def _tls():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.tapes = []
        _state.anomaly = False
    return _state


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class GradTape:
    """Ordered record of op nodes created while the tape is active.

    ``backward`` does not need an explicit tape: every node carries a
    monotonically increasing sequence number, and the backward pass walks the
    reachable nodes in descending sequence order. The tape object exists for
    inspection and for replaying exactly the recorded nodes.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tls().tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def no_grad():
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _tls().grad_enabled


@contextmanager
def detect_anomaly():
    """Check every op output for NaN/Inf while active."""
    st = _tls()
    prev = st.anomaly
    st.anomaly = True
    try:
        yield
    finally:
        st.anomaly = prev


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{g})"

    def __len__(self):
        return self.shape[0]

    # --- graph construction -----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_seq)
        st = _tls()
        if st.anomaly and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {backward.__qualname__}")
        if st.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            for tape in st.tapes:
                tape.nodes.append(out)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # --- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def bw(g):
            ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), bw)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self

        def bw(g):
            return (g * p * x.data ** (p - 1),)

        return Tensor._make(x.data**p, (x,), bw)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, self._wrap(other))

    def __rmatmul__(self, other):
        from .ops import matmul

        return matmul(self._wrap(other), self)

    # --- reductions / shape --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def broadcast_to(self, shape) -> "Tensor":
        x = self
        return Tensor._make(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, x.shape),))

    def __getitem__(self, idx) -> "Tensor":
        x = self
        if isinstance(idx, Tensor):
            idx = idx.data

        fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def bw(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(x.data[idx], (x,), bw)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Nodes are visited in exact reverse recording order. Leaf gradients are
    summed into any existing ``.grad`` (call ``zero_grad`` between steps).
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"loss is not finite: {loss.data!r}")
    if not loss.requires_grad:
        return
    if tape is not None:
        order = [n for n in reversed(tape.nodes)]
    else:
        order = sorted(_reachable(loss), key=lambda n: n._seq, reverse=True)
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.data.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
