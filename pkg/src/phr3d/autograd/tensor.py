"""Reverse-mode automatic differentiation on dense numpy buffers.

The engine is deliberately small: tensors are immutable once produced by an
op, every op builds its output together with a backward closure, and
``Tensor.backward`` replays the closures in reverse topological order.
Gradients accumulate additively across fan-out and are cleared explicitly
between optimizer steps.  Any NaN/Inf appearing in a forward result or an
accumulated gradient is a hard error.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional

import numpy as np

from ..errors import NumericError

_SUPPORTED_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = arr[~np.isfinite(arr)]
        raise NumericError(f"non-finite values in {what}: first offender {bad.flat[0]!r}")


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in _SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense n-dimensional array with optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- construction used by ops ------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Iterable["Tensor"], backward_fn, op_name: str) -> "Tensor":
        check_finite(data, f"output of {op_name}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise NumericError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward pass ------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``grad`` defaults to ones, which is the usual seed for scalar losses.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if children_done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                check_finite(node.grad, "accumulated gradient")
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor plus the rule used to (re)initialize it.

    ``frozen`` excludes the parameter from optimizer updates; freezing also
    drops ``requires_grad`` so no graph is built through it.
    """

    __slots__ = ("tensor", "name", "init_spec", "frozen")

    def __init__(self, data, init_spec, name: str = "", dtype=None):
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.init_spec = init_spec
        self.frozen = False

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = _as_array(value, self.tensor.data.dtype)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def freeze(self) -> None:
        self.frozen = True
        self.tensor.requires_grad = False
        self.tensor.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.tensor.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, frozen={self.frozen})"
