"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op builds its output with :func:`make_result`, which
records the parent tensors and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks that graph in reverse
topological order.  Gradients of intermediate nodes live only for the
duration of a single backward pass; leaves that require gradients (inputs
and :class:`Parameter` objects) accumulate into ``.grad`` across calls until
they are explicitly zeroed.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import NumericalError, UsageError

DTYPE = np.float64

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def check_finite(array: np.ndarray, where: str) -> None:
    # NaN and +/-Inf all propagate into the sum; one pass, no temporaries.
    if not np.isfinite(np.add.reduce(array, axis=None)) and not np.isfinite(array).all():
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """A dense array plus an optional gradient buffer.

    Feature maps are 4-D in NCHW order; per-channel vectors (batch-norm
    affine terms, biases) and the scalar loss use the same class.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def offset(self, index: Sequence[int]) -> int:
        """Row-major flat offset of a multi-index (NCHW for feature maps)."""
        return int(np.ravel_multi_index(tuple(index), self.shape))

    def index(self, offset: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(offset, self.shape))

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{label}{op}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf with its RMSprop squared-gradient running average."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.accumulator = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap an op's output, recording the graph edge when gradients are needed."""
    check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(x.data.sum()), (x,), backward_fn, "sum")


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; a node met again while still on the stack means a cycle.
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise RuntimeError(f"cycle detected in computation graph at {node!r}")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            child = parents[i]
            if state.get(id(child)) == 1:
                raise RuntimeError(f"cycle detected in computation graph at {child!r}")
            if state.get(id(child)) != 2 and child.requires_grad:
                stack.append((child, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring gradients")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            check_finite(g, "backward")
            node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g
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
