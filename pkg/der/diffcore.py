"""Minimal reverse-mode differentiation over dense float64 tensors.

A :class:`Graph` is an immutable, topologically ordered list of primitive
operations. Graphs carry no tensors of their own (apart from literal
constants); every evaluation binds parameter and constant leaves by name, so a
graph built once can be evaluated over any batch size and shared freely
between threads.

The primitive set is closed: ``add``, ``mul``, ``matmul``, ``relu``, ``abs``,
``elu``, ``sum`` and ``sqerr``. Networks and losses are composed from these.
``add`` and ``mul`` follow numpy broadcasting; their gradients are summed back
to the operand shapes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
import numpy.typing as npt

from der.errors import (
    GraphError,
    NonFiniteError,
    ShapeError,
    UnboundLeafError,
    UnknownProbeError,
)

Tensor = npt.NDArray[np.float64]

# Checked mode validates finiteness of every bound leaf. The test suite turns
# it on; training leaves it off unless DER_CHECKED=1 is exported.
CHECKED = os.getenv("DER_CHECKED", "0") == "1"

_ARITY = {
    "add": 2,
    "mul": 2,
    "matmul": 2,
    "sqerr": 2,
    "relu": 1,
    "abs": 1,
    "elu": 1,
    "sum": 1,
}
PRIMITIVES = frozenset(_ARITY)


class LeafKind(str, Enum):
    PARAM = "param"
    CONST = "const"


@dataclass(frozen=True)
class Node:
    """One graph entry: a leaf or a primitive applied to earlier nodes."""

    op: str
    inputs: tuple[int, ...] = ()
    name: str | None = None
    kind: LeafKind | None = None
    axis: int | None = None
    value: Tensor | None = field(default=None, compare=False, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"


def as_tensor(value: npt.ArrayLike, *, checked: bool = True) -> Tensor:
    """Convert ``value`` to a float64 array, rejecting NaN/Inf when checked."""
    arr = np.asarray(value, dtype=np.float64)
    if checked and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or infinite entries")
    return arr


class Graph:
    """Immutable, validated computation graph."""

    def __init__(self, nodes: Sequence[Node], probes: Mapping[str, int] | None = None) -> None:
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.leaves: dict[str, int] = {}
        for index, node in enumerate(self.nodes):
            if node.is_leaf:
                if node.inputs:
                    raise GraphError(f"leaf node {index} has inputs")
                if node.value is None:
                    if not node.name:
                        raise GraphError(f"leaf node {index} has neither a name nor a value")
                    if node.name in self.leaves:
                        raise GraphError(f"duplicate leaf name {node.name!r}")
                    self.leaves[node.name] = index
                continue
            if node.op not in PRIMITIVES:
                raise GraphError(f"unknown primitive {node.op!r} at node {index}")
            if len(node.inputs) != _ARITY[node.op]:
                raise GraphError(f"{node.op} at node {index} expects {_ARITY[node.op]} inputs")
            if any(not 0 <= j < index for j in node.inputs):
                raise GraphError(f"graph is not topologically ordered at node {index}")
        self.probes: dict[str, int] = dict(probes or {})
        for name, index in self.probes.items():
            if not 0 <= index < len(self.nodes):
                raise GraphError(f"probe {name!r} points outside the graph")
        self.params: tuple[str, ...] = tuple(
            n.name for n in self.nodes if n.is_leaf and n.kind is LeafKind.PARAM and n.name
        )

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, name: str) -> int:
        """Index of the leaf or probe called ``name``."""
        if name in self.leaves:
            return self.leaves[name]
        if name in self.probes:
            return self.probes[name]
        raise UnknownProbeError(name)


class GraphBuilder:
    """Append-only builder producing a :class:`Graph`."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._probes: dict[str, int] = {}

    def _push(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def param(self, name: str) -> int:
        return self._push(Node("leaf", name=name, kind=LeafKind.PARAM))

    def const(self, name: str) -> int:
        return self._push(Node("leaf", name=name, kind=LeafKind.CONST))

    def literal(self, value: npt.ArrayLike) -> int:
        arr = as_tensor(value).copy()
        arr.flags.writeable = False
        return self._push(Node("leaf", kind=LeafKind.CONST, value=arr))

    def add(self, a: int, b: int) -> int:
        return self._push(Node("add", (a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._push(Node("mul", (a, b)))

    def matmul(self, a: int, b: int) -> int:
        return self._push(Node("matmul", (a, b)))

    def relu(self, a: int) -> int:
        return self._push(Node("relu", (a,)))

    def abs(self, a: int) -> int:
        return self._push(Node("abs", (a,)))

    def elu(self, a: int) -> int:
        return self._push(Node("elu", (a,)))

    def sum(self, a: int, axis: int | None = None) -> int:
        return self._push(Node("sum", (a,), axis=axis))

    def sqerr(self, a: int, b: int) -> int:
        return self._push(Node("sqerr", (a, b)))

    def linear(self, x: int, weight: int, bias: int) -> int:
        return self.add(self.matmul(x, weight), bias)

    def probe(self, node: int, name: str) -> int:
        """Register ``node`` so its gradient is reported after backward."""
        if name in self._probes:
            raise GraphError(f"duplicate probe name {name!r}")
        self._probes[name] = node
        return node

    def build(self) -> Graph:
        return Graph(self._nodes, self._probes)


def _elu(a: Tensor) -> Tensor:
    return np.where(a > 0.0, a, np.expm1(np.minimum(a, 0.0)))


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    return a @ b


_FORWARD: dict[str, Callable[[Sequence[Tensor], Node], Tensor]] = {
    "add": lambda x, n: x[0] + x[1],
    "mul": lambda x, n: x[0] * x[1],
    "matmul": lambda x, n: _matmul(x[0], x[1]),
    "relu": lambda x, n: np.maximum(x[0], 0.0),
    "abs": lambda x, n: np.abs(x[0]),
    "elu": lambda x, n: _elu(x[0]),
    "sum": lambda x, n: np.sum(x[0], axis=n.axis, keepdims=True),
    "sqerr": lambda x, n: np.square(x[0] - x[1]),
}


def _sqerr_vjp(g: Tensor, x: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    d = 2.0 * (x[0] - x[1]) * g
    return d, -d


# Each entry maps (upstream grad, inputs, output) to per-input gradients.
# abs uses sign(), so its derivative at exactly 0 is 0.
_VJP: dict[str, Callable[[Tensor, Sequence[Tensor], Tensor], tuple[Tensor, ...]]] = {
    "add": lambda g, x, y: (g, g),
    "mul": lambda g, x, y: (g * x[1], g * x[0]),
    "matmul": lambda g, x, y: (g @ x[1].T, x[0].T @ g),
    "relu": lambda g, x, y: (g * (x[0] > 0.0),),
    "abs": lambda g, x, y: (g * np.sign(x[0]),),
    "elu": lambda g, x, y: (g * np.where(x[0] > 0.0, 1.0, y + 1.0),),
    "sum": lambda g, x, y: (np.broadcast_to(g, x[0].shape),),
    "sqerr": lambda g, x, y: _sqerr_vjp(g, x),
}


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def forward(
    graph: Graph,
    bindings: Mapping[str, npt.ArrayLike],
    *,
    checked: bool | None = None,
) -> list[Tensor]:
    """Evaluate every node; the result is indexed by node position."""
    checked = CHECKED if checked is None else checked
    values: list[Tensor] = []
    for index, node in enumerate(graph.nodes):
        if node.is_leaf:
            if node.value is not None:
                values.append(node.value)
                continue
            try:
                bound = bindings[node.name]  # type: ignore[index]
            except KeyError:
                raise UnboundLeafError(f"leaf {node.name!r} is not bound") from None
            values.append(as_tensor(bound, checked=checked))
            continue
        args = [values[j] for j in node.inputs]
        try:
            values.append(_FORWARD[node.op](args, node))
        except ValueError as exc:
            shapes = ", ".join(str(a.shape) for a in args)
            raise ShapeError(f"{node.op} at node {index} rejected shapes {shapes}: {exc}") from exc
    return values


@dataclass(frozen=True)
class GradientReport:
    """Gradients of one scalar with respect to parameter leaves and probes."""

    loss: float
    params: Mapping[str, Tensor]
    probes: Mapping[str, Tensor]


def backward(
    graph: Graph,
    loss_node: int,
    bindings: Mapping[str, npt.ArrayLike],
    *,
    values: Sequence[Tensor] | None = None,
    checked: bool | None = None,
) -> GradientReport:
    """Reverse-mode gradients of the scalar at ``loss_node``.

    ``values`` may carry the result of a previous :func:`forward` over the
    same bindings to avoid evaluating twice.
    """
    if not 0 <= loss_node < len(graph):
        raise GraphError(f"loss node {loss_node} is outside the graph")
    if values is None:
        values = forward(graph, bindings, checked=checked)
    if values[loss_node].size != 1:
        raise GraphError(f"loss must be scalar-shaped, got {values[loss_node].shape}")

    grads: list[Tensor | None] = [None] * len(graph)
    grads[loss_node] = np.ones_like(values[loss_node])
    for index in range(loss_node, -1, -1):
        upstream = grads[index]
        node = graph.nodes[index]
        if upstream is None or node.is_leaf:
            continue
        args = [values[j] for j in node.inputs]
        for j, g in zip(node.inputs, _VJP[node.op](upstream, args, values[index])):
            g = _unbroadcast(g, values[j].shape)
            grads[j] = g if grads[j] is None else grads[j] + g

    def _grad(i: int) -> Tensor:
        g = grads[i]
        return np.zeros_like(values[i]) if g is None else np.array(g)

    return GradientReport(
        loss=float(values[loss_node].item()),
        params={name: _grad(graph.leaves[name]) for name in graph.params},
        probes={name: _grad(i) for name, i in graph.probes.items()},
    )


def probe_gradient(report: GradientReport, probe_id: str) -> Tensor:
    try:
        return report.probes[probe_id]
    except KeyError:
        raise UnknownProbeError(probe_id) from None


def finite_difference(
    graph: Graph,
    loss_node: int,
    bindings: Mapping[str, npt.ArrayLike],
    leaf: str,
    step: float = 1e-5,
) -> Tensor:
    """Central-difference estimate of d(loss)/d(leaf), entry by entry."""
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    if leaf not in base:
        raise UnboundLeafError(f"leaf {leaf!r} is not bound")
    target = base[leaf]
    estimate = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        original = target[idx]
        target[idx] = original + step
        plus = forward(graph, base, checked=False)[loss_node].item()
        target[idx] = original - step
        minus = forward(graph, base, checked=False)[loss_node].item()
        target[idx] = original
        estimate[idx] = (plus - minus) / (2.0 * step)
    return estimate


def relative_error(a: npt.ArrayLike, b: npt.ArrayLike, floor: float = 1e-8) -> float:
    """Norm-wise relative error used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale
