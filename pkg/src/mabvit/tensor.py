"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is exactly what the model needs: elementwise arithmetic
(with numpy-style broadcasting), batched matmul, trailing-dim transpose,
reshape, concat/split, reductions, exp/log/erf/sigmoid, power by a constant,
and a numerically stable last-dim softmax.

Gradient contract: ``backward()`` on a scalar populates ``grad`` on every
reachable tensor with ``requires_grad=True``, *accumulating* into any grads
already present (call :func:`zero_grads` between independent passes).  The
computation graph is recorded dynamically during the forward pass and freed
once ``backward()`` finishes; calling ``backward()`` again on the same output
raises :class:`~mabvit.errors.GraphError` until a new forward pass is run.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy import special as _special

from .errors import GraphError, ShapeError


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            x = self

            def bw(g):
                x._accumulate(g)

            return Tensor._make(self.data + float(other), (self,), bw)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        try:
            data = a.data + b.data
        except ValueError:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
        return Tensor._make(data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            return self + (-float(other))
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        try:
            data = a.data - b.data
        except ValueError:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
        return Tensor._make(data, (a, b), bw)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            c = float(other)
            x = self

            def bw(g):
                x._accumulate(g * c)

            return Tensor._make(self.data * c, (self,), bw)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        try:
            data = a.data * b.data
        except ValueError:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
        return Tensor._make(data, (a, b), bw)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            return self * (1.0 / float(other))
        return self * (other ** -1.0)

    def __pow__(self, exponent: float) -> Tensor:
        c = float(exponent)
        x = self
        data = x.data ** c

        def bw(g):
            x._accumulate(g * (c * x.data ** (c - 1.0)))

        return Tensor._make(data, (x,), bw)

    # -- matmul and layout ----------------------------------------------------

    def matmul(self, other: Tensor) -> Tensor:
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
        if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(
                f"matmul: leading dims must match unless one operand is rank-2; "
                f"got {a.shape} and {b.shape}"
            )

        if a.ndim > 2 and b.ndim == 2:
            # Flatten leading dims into one GEMM; dominant path for linear layers.
            lead = a.shape[:-1]
            a2 = a.data.reshape(-1, a.shape[-1])
            data = (a2 @ b.data).reshape(*lead, b.shape[-1])

            def bw(g):
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    a._accumulate((g2 @ b.data.T).reshape(a.shape))
                if b.requires_grad:
                    b._accumulate(a2.T @ g2)

            return Tensor._make(data, (a, b), bw)

        data = np.matmul(a.data, b.data)

        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._make(data, (a, b), bw)

    __matmul__ = matmul

    def transpose_last(self) -> Tensor:
        if self.ndim < 2:
            raise ShapeError(f"transpose_last needs rank >= 2, got shape {self.shape}")
        x = self

        def bw(g):
            x._accumulate(np.swapaxes(g, -1, -2))

        return Tensor._make(np.swapaxes(self.data, -1, -2).copy(), (self,), bw)

    def reshape(self, shape: Sequence[int]) -> Tensor:
        shape = tuple(int(s) for s in shape)
        x = self
        old = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {old} (size {self.size}) to {shape}") from None

        def bw(g):
            x._accumulate(g.reshape(old))

        return Tensor._make(data, (self,), bw)

    def slice_axis(self, axis: int, start: int, stop: int) -> Tensor:
        """Contiguous slice [start, stop) along one axis."""
        axis = axis % self.ndim
        if not (0 <= start < stop <= self.shape[axis]):
            raise ShapeError(
                f"slice [{start}:{stop}) out of range for axis {axis} of shape {self.shape}"
            )
        x = self
        idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(self.ndim))

        def bw(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g

        return Tensor._make(self.data[idx].copy(), (self,), bw)

    def split(self, sections: int, axis: int = -1) -> list[Tensor]:
        """Split into `sections` equal parts along `axis`."""
        n = self.shape[axis]
        if n % sections != 0:
            raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
        step = n // sections
        axis = axis % self.ndim
        x = self
        outs = []
        for i in range(sections):
            idx = tuple(
                slice(i * step, (i + 1) * step) if d == axis else slice(None)
                for d in range(self.ndim)
            )
            piece = self.data[idx].copy()

            def bw(g, idx=idx):
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[idx] += g

            outs.append(Tensor._make(piece, (self,), bw))
        return outs

    # -- reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        x = self
        data = x.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape))

        return Tensor._make(np.asarray(data), (x,), bw)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def var(self, axis: int, keepdims: bool = False) -> Tensor:
        """Population variance along `axis` (divide by n, not n-1)."""
        m = self.mean(axis=axis, keepdims=True)
        d = self - m
        return (d * d).mean(axis=axis, keepdims=keepdims)

    # -- pointwise functions --------------------------------------------------

    def exp(self) -> Tensor:
        x = self
        data = np.exp(x.data)

        def bw(g):
            x._accumulate(g * data)

        return Tensor._make(data, (x,), bw)

    def log(self) -> Tensor:
        x = self

        def bw(g):
            x._accumulate(g / x.data)

        return Tensor._make(np.log(x.data), (x,), bw)

    def erf(self) -> Tensor:
        x = self
        scale = 2.0 / np.sqrt(np.pi)

        def bw(g):
            x._accumulate(g * (scale * np.exp(-x.data * x.data)))

        return Tensor._make(_special.erf(x.data), (x,), bw)

    def sigmoid(self) -> Tensor:
        x = self
        data = _special.expit(x.data)

        def bw(g):
            x._accumulate(g * (data * (1.0 - data)))

        return Tensor._make(data, (x,), bw)

    def softmax_lastdim(self) -> Tensor:
        return softmax_lastdim(self)

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; frees the graph afterwards."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is None:
            raise GraphError(
                "no computation graph attached to this tensor; "
                "it is either a leaf, detached, or its graph was already freed"
            )

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._backward is not None:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            node._backward(node.grad)
        for node in topo:
            node._parents = ()
            node._backward = None


# -- free functions -----------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last dimension (max-subtraction form)."""
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError(f"softmax_lastdim needs a non-empty last dim, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        x._accumulate(out * (g - inner))

    return Tensor._make(out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.matmul(b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = tuple(
                    slice(int(lo), int(hi)) if d == axis else slice(None)
                    for d in range(g.ndim)
                )
                t._accumulate(g[idx])

    return Tensor._make(data, tuple(tensors), bw)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
