"""A minimal dense tensor with reverse-mode automatic differentiation.

Every operation records a backward closure on its output; calling
backward() on a scalar result walks the graph once in reverse
topological order and accumulates gradients into the tensors that
requested them. Tensors wrapping plain data (requires_grad=False) prune
the graph, so only paths reaching parameters are recorded.

Gradients of intermediate nodes are freed as soon as they have been
propagated, which keeps peak memory close to the forward pass.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the operand that broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def ensure(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None]) -> "Tensor":
        """Build an op output; vjps[i] maps the output gradient to parent i."""
        out = Tensor(data)
        tracked = [(p, vjp) for p, vjp in zip(parents, vjps)
                   if vjp is not None and (p.requires_grad or p._backward is not None)]
        if tracked:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in tracked)

            def backward() -> None:
                g = out.grad
                for parent, vjp in tracked:
                    piece = vjp(g)
                    if parent.grad is None:
                        parent.grad = piece
                    else:
                        parent.grad = parent.grad + piece

            out._backward = backward
        return out

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from a scalar result."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar result")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                if free_graph:
                    node._backward = None
                    node._parents = ()
                    node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- shape accessors ---------------------------------------------------

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

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic --------------------------------------------------------

    # python scalars stay unwrapped so float32 graphs are not promoted
    # (a wrapped 0-d float64 array would win the numpy promotion)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(self.data + other, (self,), (lambda g: g,))
        other = Tensor.ensure(other)
        return Tensor.from_op(
            self.data + other.data, (self, other),
            (lambda g: unbroadcast(g, self.data.shape),
             lambda g: unbroadcast(g, other.data.shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(self.data - other, (self,), (lambda g: g,))
        other = Tensor.ensure(other)
        return Tensor.from_op(
            self.data - other.data, (self, other),
            (lambda g: unbroadcast(g, self.data.shape),
             lambda g: unbroadcast(-g, other.data.shape)))

    def __rsub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(other - self.data, (self,), (lambda g: -g,))
        return Tensor.ensure(other) - self

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(self.data * other, (self,),
                                  (lambda g: g * other,))
        other = Tensor.ensure(other)
        return Tensor.from_op(
            self.data * other.data, (self, other),
            (lambda g: unbroadcast(g * other.data, self.data.shape),
             lambda g: unbroadcast(g * self.data, other.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(self.data / other, (self,),
                                  (lambda g: g / other,))
        other = Tensor.ensure(other)
        return Tensor.from_op(
            self.data / other.data, (self, other),
            (lambda g: unbroadcast(g / other.data, self.data.shape),
             lambda g: unbroadcast(-g * self.data / (other.data * other.data),
                                   other.data.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return Tensor.from_op(
                other / self.data, (self,),
                (lambda g: -g * other / (self.data * self.data),))
        return Tensor.ensure(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** exponent
        return Tensor.from_op(
            data, (self,),
            (lambda g: g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = Tensor.ensure(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must have rank >= 2")
        return Tensor.from_op(
            self.data @ other.data, (self, other),
            (lambda g: unbroadcast(g @ other.data.swapaxes(-1, -2), self.data.shape),
             lambda g: unbroadcast(self.data.swapaxes(-1, -2) @ g, other.data.shape)))

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor.from_op(self.data.reshape(shape), (self,),
                              (lambda g: g.reshape(old),))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,),
                              (lambda g: g.transpose(inverse),))

    # -- reductions and pointwise ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def vjp(g: np.ndarray) -> np.ndarray:
            g_local = g
            if axis is not None and not keepdims:
                g_local = np.expand_dims(g_local, axis)
            return np.broadcast_to(g_local, shape).copy()

        return Tensor.from_op(data, (self,), (vjp,))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            scale = 1.0 / self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            scale = 1.0
            for a in axes:
                scale /= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * scale

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        return Tensor.from_op(data, (self,), (lambda g: g * data,))

    def log(self) -> "Tensor":
        return Tensor.from_op(np.log(self.data), (self,),
                              (lambda g: g / self.data,))

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)
        return Tensor.from_op(data, (self,), (lambda g: g * 0.5 / data,))

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)
        return Tensor.from_op(data, (self,), (lambda g: g * (1.0 - data * data),))
