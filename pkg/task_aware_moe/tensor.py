#!/usr/bin/env python3
"""
Dense Tensor with Reverse-Mode Automatic Differentiation

A Tensor wraps a float64 numpy array. Operations in ``functional`` build a
graph of Tensors whose ``_backward`` closures push gradients to their
parents; ``Tensor.backward`` walks that graph in reverse topological order.

Only scalar and same-shape broadcasting exist. Row-wise combinations (bias
add, per-token scaling) are explicit ops so that a silent broadcast can
never hide a shape bug.
"""

import contextlib
import logging
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from task_aware_moe.errors import ContractError

logger = logging.getLogger("task_aware_moe.tensor")

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """
    Dense float64 array with an optional gradient.

    Attributes:
        data: numpy array holding the values (row-major)
        requires_grad: whether gradients are accumulated into ``grad``
        grad: numpy array shaped like ``data`` once backward has reached it
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] = _noop
        self._op = ""

    # ------------------------------------------------------------------
    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # Gradient bookkeeping

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into this tensor's gradient (fan-out sums)"""
        if not self.requires_grad:
            return
        grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self) -> "ComputationTape":
        """
        Back-propagate from this scalar tensor.

        Returns:
            The tape that was replayed, in forward topological order

        Raises:
            ContractError: if this tensor is not a single-element loss
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = ComputationTape.from_output(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(tape.nodes):
            node._backward()
        return tape

    # ------------------------------------------------------------------
    # Operator sugar; implementations live in functional

    def __add__(self, other):
        from task_aware_moe import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from task_aware_moe import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from task_aware_moe import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from task_aware_moe import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from task_aware_moe import functional as F
        return F.mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        from task_aware_moe import functional as F
        return F.mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        from task_aware_moe import functional as F
        return F.matmul(self, other)


def _noop() -> None:
    return None


class ComputationTape:
    """Recorded operations reachable from an output, in topological order"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputationTape":
        # Iterative DFS; deep transformer graphs would overflow recursion.
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None],
                op: str) -> Tensor:
    """
    Wrap an op's forward value and register its backward rule.

    Args:
        data: forward result
        parents: input tensors
        backward_fn: receives d(loss)/d(out) and accumulates into parents
        op: short name for debugging

    Returns:
        The output tensor, attached to the graph when any parent needs grad
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = ""
    out._op = op
    out._parents = ()
    out._backward = _noop
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)

        def _backward() -> None:
            if out.grad is not None:
                backward_fn(out.grad)

        out._backward = _backward
    return out


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data: ArrayLike, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02,
          requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=requires_grad)
