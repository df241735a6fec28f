"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray; every operation that touches a tensor requiring
gradients records its parents and a backward closure.  ``backward()`` walks
the recorded graph once in reverse topological order, accumulating gradients
additively into ``.grad``.  Nothing here is lazy or fused; determinism comes
from the fixed evaluation order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.special


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        o = self._coerce(other)

        def bwd(g, a=self, b=o):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return Tensor._op(self.data + o.data, (self, o), bwd)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g, a=self):
            _accum(a, -g)

        return Tensor._op(-self.data, (self,), bwd)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        o = self._coerce(other)

        def bwd(g, a=self, b=o):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor._op(self.data * o.data, (self, o), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        o = self._coerce(other)

        def bwd(g, a=self, b=o):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._op(self.data / o.data, (self, o), bwd)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")

        def bwd(g, a=self, p=p):
            _accum(a, g * p * a.data ** (p - 1))

        return Tensor._op(self.data**p, (self,), bwd)

    def __matmul__(self, other) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(np.asarray(other))
        if self.data.ndim < 2 or o.data.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def bwd(g, a=self, b=o):
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return Tensor._op(self.data @ o.data, (self, o), bwd)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g, a=self, y=out_data):
            _accum(a, g * y)

        return Tensor._op(out_data, (self,), bwd)

    def log(self) -> "Tensor":
        def bwd(g, a=self):
            _accum(a, g / a.data)

        return Tensor._op(np.log(self.data), (self,), bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bwd(g, a=self, y=out_data):
            _accum(a, g / (2.0 * y))

        return Tensor._op(out_data, (self,), bwd)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g, a=self, y=out_data):
            _accum(a, g * (1.0 - y * y))

        return Tensor._op(out_data, (self,), bwd)

    def sigmoid(self) -> "Tensor":
        out_data = scipy.special.expit(self.data)

        def bwd(g, a=self, y=out_data):
            _accum(a, g * y * (1.0 - y))

        return Tensor._op(out_data, (self,), bwd)

    def relu(self) -> "Tensor":
        def bwd(g, a=self):
            _accum(a, g * (a.data > 0))

        return Tensor._op(np.maximum(self.data, 0), (self,), bwd)

    def abs(self) -> "Tensor":
        def bwd(g, a=self):
            _accum(a, g * np.sign(a.data))

        return Tensor._op(np.abs(self.data), (self,), bwd)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def bwd(g, a=self, y=y, axis=axis):
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, (g - inner) * y)

        return Tensor._op(y, (self,), bwd)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

        return Tensor._op(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- shape surgery -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bwd(g, a=self):
            _accum(a, g.reshape(a.data.shape))

        return Tensor._op(self.data.reshape(shape), (self,), bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(range(self.data.ndim))[::-1]
        inverse = tuple(np.argsort(axes))

        def bwd(g, a=self, inverse=inverse):
            _accum(a, g.transpose(inverse))

        return Tensor._op(self.data.transpose(axes), (self,), bwd)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Contiguous slice along one axis."""
        sel = tuple(
            slice(start, start + length) if i == axis else slice(None)
            for i in range(self.data.ndim)
        )

        def bwd(g, a=self, sel=sel):
            if not a.requires_grad:
                return
            buf = np.zeros_like(a.data)
            buf[sel] = g
            _accum(a, buf)

        return Tensor._op(np.ascontiguousarray(self.data[sel]), (self,), bwd)

    def index_select(self, axis: int, indices) -> "Tensor":
        idx = np.asarray(indices, dtype=np.int64)
        out_data = np.take(self.data, idx, axis=axis)

        def bwd(g, a=self, axis=axis, idx=idx):
            if not a.requires_grad:
                return
            buf = np.zeros_like(a.data)
            sel = tuple(idx if i == axis else slice(None) for i in range(a.data.ndim))
            np.add.at(buf, sel, g)
            _accum(a, buf)

        return Tensor._op(out_data, (self,), bwd)

    @staticmethod
    def cat(tensors: Iterable["Tensor"], axis: int = 0) -> "Tensor":
        ts = list(tensors)
        out_data = np.concatenate([t.data for t in ts], axis=axis)
        sizes = [t.data.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def bwd(g, ts=ts, axis=axis, offsets=offsets):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                sel = tuple(
                    slice(lo, hi) if i == axis else slice(None) for i in range(g.ndim)
                )
                _accum(t, g[sel])

        return Tensor._op(out_data, ts, bwd)
