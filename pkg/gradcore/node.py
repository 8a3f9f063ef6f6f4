# gradcore/node.py
"""Computation-graph node and reverse-mode backward pass."""
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not fit an operation."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces inf or nan."""


def as_matrix(data, name: str = "value") -> np.ndarray:
    """
    Coerce data into a finite 2-D float64 array.

    Scalars become 1x1, vectors become a single row.
    """
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """
    A value in the computation record.

    Leaves are created with `constant` or `parameter`; every op returns a new
    Node whose parents are its operands and whose value must be finite.
    Gradients accumulate with += and must be cleared with `zero_grad`
    between steps.
    """

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple["Node", ...] = (),
        op: str = "leaf",
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if parents and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced non-finite entries")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self.op = op
        self.name = name
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def detach(self) -> "Node":
        """Same value, no history."""
        return Node(self.value.copy(), name=self.name)

    def backward(self, seed: Optional[np.ndarray] = None):
        """
        Propagate gradients from this node to every reachable node.

        Without a seed the node must be 1x1 and is seeded with 1.
        """
        if seed is None:
            if self.value.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar node, got {self.value.shape}"
                )
            seed = np.ones_like(self.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.value.shape:
            raise DimensionError(f"seed shape {seed.shape} != value shape {self.value.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        upstream = {id(self): seed}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            node.grad += g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} op={self.op} shape={self.value.shape}>"


def _topological_order(root: Node) -> List[Node]:
    """Parents before children; each node exactly once. Iterative to avoid deep recursion."""
    order: List[Node] = []
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def constant(data, name: Optional[str] = None) -> Node:
    """Leaf that never receives gradient."""
    return Node(as_matrix(data, name or "constant"), name=name)


def parameter(data, name: Optional[str] = None) -> Node:
    """Leaf that collects gradient."""
    return Node(as_matrix(data, name or "parameter"), requires_grad=True, name=name)


def zero_grads(nodes: Iterable[Node]):
    for node in nodes:
        node.zero_grad()
