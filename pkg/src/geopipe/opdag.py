"""Operator DAG: node/edge model, BP edge derivation, and per-device boundary tables."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .errors import CycleDetected, DuplicateName, UnassignedNode, UnknownArgReference


class OpType(Enum):
    PLACEHOLDER = "placeholder"
    VARIABLE = "variable"
    PARAMETRIC = "parametric"
    NONPARAMETRIC = "nonparametric"
    LOSS = "loss"


# Operator kinds that carry trainable parameters.
PARAMETRIC_KINDS = {"linear", "conv2d"}

_KIND_TO_TYPE = {
    "input": OpType.PLACEHOLDER,
    "label": OpType.PLACEHOLDER,
    "tensor": OpType.VARIABLE,
    "linear": OpType.PARAMETRIC,
    "conv2d": OpType.PARAMETRIC,
    "relu": OpType.NONPARAMETRIC,
    "add": OpType.NONPARAMETRIC,
    "cross_entropy": OpType.LOSS,
}


@dataclass(frozen=True)
class OpNode:
    name: str
    kind: str
    args: tuple[str, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    op_type: Optional[OpType] = None
    requires_grad: Optional[bool] = None

    def __post_init__(self):
        if self.op_type is None:
            object.__setattr__(self, "op_type", _KIND_TO_TYPE.get(self.kind, OpType.NONPARAMETRIC))
        if self.requires_grad is None:
            # Data/label placeholders receive no gradients; everything else does.
            object.__setattr__(self, "requires_grad", self.op_type is not OpType.PLACEHOLDER)
        object.__setattr__(self, "args", tuple(self.args))


@dataclass(frozen=True)
class OpDag:
    nodes: dict[str, OpNode]
    fp_edges: tuple[tuple[str, str], ...]

    @property
    def n_o(self) -> int:
        return len(self.nodes)

    def consumers(self, name: str) -> list[str]:
        return [v for (u, v) in self.fp_edges if u == name]


@dataclass
class OpData:
    """Unified inter-operator message: an activation (FP) or a gradient (BP)."""

    name: str                       # producing OP node
    op_users: list[str]
    actual_op_user: Optional[str] = None  # set on gradients: which consumer computed it
    is_loss: bool = False
    require_grad: bool = False
    local_iter: int = 0
    micro_batch: int = 0
    compress_cfg: Optional[dict] = None
    payload: Any = None

    @property
    def grad_label(self) -> Optional[str]:
        """Producer-Consumer label for gradient messages, e.g. 'Conv-Add'."""
        if self.actual_op_user is None:
            return None
        return f"{self.name}-{self.actual_op_user}"


@dataclass
class SubDagBoundary:
    subdag_id: Any
    op_nodes: set[str]
    required_acti: list[tuple[str, str]]
    send_acti: list[tuple[str, str]]
    required_grad: list[str]
    send_grad: list[str]


def build_dag(node_specs) -> OpDag:
    """Validate node specs and materialize FP edges from each node's args."""
    nodes: dict[str, OpNode] = {}
    for spec in node_specs:
        node = spec if isinstance(spec, OpNode) else OpNode(**spec)
        if node.name in nodes:
            raise DuplicateName(node.name)
        nodes[node.name] = node

    edges = []
    for node in nodes.values():
        for arg in node.args:
            if arg not in nodes:
                raise UnknownArgReference(f"{node.name} references unknown node {arg!r}")
            edges.append((arg, node.name))

    _reject_cycles(nodes, edges)
    return OpDag(nodes=nodes, fp_edges=tuple(edges))


def _reject_cycles(nodes, edges):
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for u, v in edges:
        adj[u].append(v)
    # Iterative DFS with color marking; reconstructs one offending cycle.
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    parent: dict[str, str] = {}
    for root in nodes:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(adj[root]))]
        color[root] = GRAY
        while stack:
            u, it = stack[-1]
            advanced = False
            for v in it:
                if color[v] == GRAY:
                    cycle = [v, u]
                    w = u
                    while w != v:
                        w = parent[w]
                        cycle.append(w)
                    cycle.reverse()
                    raise CycleDetected(cycle)
                if color[v] == WHITE:
                    color[v] = GRAY
                    parent[v] = u
                    stack.append((v, iter(adj[v])))
                    advanced = True
                    break
            if not advanced:
                color[u] = BLACK
                stack.pop()


def topological_order(dag: OpDag) -> list[str]:
    """Kahn's algorithm; ties broken by node-name lexicographic order."""
    indeg = {n: 0 for n in dag.nodes}
    adj: dict[str, list[str]] = {n: [] for n in dag.nodes}
    for u, v in dag.fp_edges:
        indeg[v] += 1
        adj[u].append(v)
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in adj[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    return order


def derive_bp_edges(dag: OpDag) -> tuple[tuple[str, str], ...]:
    """Reverse of the FP edges, dropping edges into leaves that take no gradient."""
    return tuple(
        (v, u) for (u, v) in dag.fp_edges if dag.nodes[u].requires_grad
    )


def compute_boundaries(dag: OpDag, assignment: dict[str, Any]) -> list[SubDagBoundary]:
    """Per-device boundary tables: which activations/gradients cross device edges.

    Cross-device FP edges show up as send_acti on the producer side and
    required_acti on the consumer side; the gradient direction is reversed and
    labeled 'Producer-Consumer'.
    """
    for name in dag.nodes:
        if name not in assignment:
            raise UnassignedNode(name)

    devices = sorted(set(assignment.values()), key=str)
    boundaries = {
        d: SubDagBoundary(d, set(), [], [], [], []) for d in devices
    }
    for name, dev in assignment.items():
        boundaries[dev].op_nodes.add(name)

    bp = set(derive_bp_edges(dag))
    for u, v in dag.fp_edges:
        du, dv = assignment[u], assignment[v]
        if du == dv:
            continue
        boundaries[du].send_acti.append((u, v))
        boundaries[dv].required_acti.append((u, v))
        if (v, u) in bp:
            label = f"{u}-{v}"
            boundaries[dv].send_grad.append(label)
            boundaries[du].required_grad.append(label)

    for b in boundaries.values():
        b.required_acti.sort()
        b.send_acti.sort()
        b.required_grad.sort()
        b.send_grad.sort()
    return [boundaries[d] for d in devices]
