"""Reverse-mode differentiation over dense 4-D tensors.

Every value flowing through the network is a :class:`Tensor4`: a numpy array
of shape (batch, channels, height, width) plus an optional gradient store.
Operations in :mod:`lidarflow.ops` attach an :class:`OpRecord` to their output;
:func:`backward` replays the records in reverse topological order and
accumulates gradients into every reachable leaf that requires them.

Precision is a configuration, not a type: tensors carry float64 (test
precision) or float32 (training precision) data and operations preserve the
input dtype.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ReentrancyError, ShapeError

# Module-wide switch for the finite-value invariant. Enabled by default;
# disabling it is only sensible in profiling runs.
FINITE_CHECKS = True

Dims = tuple[int, int, int, int]


class OpRecord:
    """One recorded operation: inputs, a backward rule, and a label.

    The backward rule maps the gradient at the output to one gradient per
    input (``None`` for inputs that do not need one).
    """

    __slots__ = ("inputs", "rule", "name")

    def __init__(self, inputs: Sequence["Tensor4"],
                 rule: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
                 name: str):
        self.inputs = tuple(inputs)
        self.rule = rule
        self.name = name


class Tensor4:
    """Dense (batch, channels, height, width) array in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _op: OpRecord | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4 dims, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"non-finite values in tensor of shape {arr.shape}"
                + (f" produced by {_op.name}" if _op is not None else ""))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op = _op
        self._backward_ran = False

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar tensor {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_ran = False

    def detach(self) -> "Tensor4":
        return Tensor4(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor4(dims={self.dims}{flag})"


def record(output_data: np.ndarray, inputs: Sequence[Tensor4],
           rule: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
           name: str) -> Tensor4:
    """Wrap an op result, attaching a record only when a gradient can flow."""
    needs = any(t.requires_grad for t in inputs)
    op = OpRecord(inputs, rule, name) if needs else None
    return Tensor4(output_data, requires_grad=needs, _op=op)


class DiffGraph:
    """Topologically ordered view of the operations reachable from a scalar loss.

    The operation list is ordered so that every operation's inputs precede it;
    running :meth:`backward` once populates ``grad`` on every requires-grad
    leaf. Running it twice raises :class:`ReentrancyError`.
    """

    def __init__(self, loss: Tensor4):
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got dims {loss.dims}")
        self.loss = loss
        self.nodes = _toposort(loss)
        self._spent = False

    @property
    def ops(self) -> list[OpRecord]:
        return [n._op for n in self.nodes if n._op is not None]

    def backward(self) -> None:
        if self._spent or self.loss._backward_ran:
            raise ReentrancyError("backward already ran for this graph; reset gradients first")
        self._spent = True
        self.loss._backward_ran = True

        adjoint: dict[int, np.ndarray] = {
            id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._op is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._op is None:
                continue
            grads = node._op.rule(g)
            if len(grads) != len(node._op.inputs):
                raise ShapeError(f"{node._op.name}: backward rule arity mismatch")
            for parent, gp in zip(node._op.inputs, grads):
                if gp is None or not parent.requires_grad:
                    continue
                if gp.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node._op.name}: gradient shape {gp.shape} "
                        f"!= input shape {parent.data.shape}")
                if FINITE_CHECKS and not np.all(np.isfinite(gp)):
                    raise NonFiniteError(f"non-finite gradient out of {node._op.name}")
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = gp if prev is None else prev + gp


def backward(loss: Tensor4) -> DiffGraph:
    """Run reverse-mode differentiation from a scalar loss; returns the graph."""
    graph = DiffGraph(loss)
    graph.backward()
    return graph


def _toposort(root: Tensor4) -> list[Tensor4]:
    # Iterative post-order DFS; recursion would overflow on deep graphs.
    order: list[Tensor4] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor4, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for parent in node._op.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order
