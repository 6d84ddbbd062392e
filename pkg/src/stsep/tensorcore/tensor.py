"""Dense tensor value type with a dynamic reverse-mode graph."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from stsep.errors import NonFiniteError, UsageError

MAX_RANK = 5
DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-d float array (rank <= 5) that can take part in autodiff.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Intermediate results hold a closure mapping the
    upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "_op", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise UsageError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False
        self._op = "leaf"
        self._retain = False

    # construction of op results -------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        """Wrap ``data`` as the output of an op; records the graph edge when needed."""
        if _finite_checks and data.size and not np.isfinite(data.sum()):
            if not np.isfinite(data).all():
                raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out._op = op
        out._retain = False
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # basic properties -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> Tensor:
        """Copy into a new leaf of another float width (no graph edge)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def retain_grad(self) -> Tensor:
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar is attached in ops.py to keep this module dependency-free


def _raise_item(t: Tensor) -> float:
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise UsageError("backward through a graph that was already consumed")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf.

    Each node is visited once, in reverse topological order; a node's
    backward closure runs only after every consumer has contributed.
    The graph is released afterwards and cannot be traversed again.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        fn = node._backward
        if fn is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain and g is not None:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if g is not None:
            pgrads = fn(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise UsageError(f"{node._op}: gradient shape {pg.shape} != {p.data.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
