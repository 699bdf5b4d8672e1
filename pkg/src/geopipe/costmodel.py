"""Per-operator FLOPs/size estimation, device and link profiles, alpha-beta costs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import (
    DegenerateFit,
    InsufficientSamples,
    MissingShapeAttr,
    UnassignedNode,
)
from .opdag import OpDag, OpNode

BYTES_PER_ELEM = 4  # 32-bit activations/gradients on the wire

# BP is modeled as two FP-equivalent passes (input grads + weight grads).
BP_FLOPS_FACTOR = 2.0


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    peak_flops: float                 # S*, FLOP/s
    lam: float = 1.0                  # regression-fitted scaling factor in (0, 1]
    mem_gpu: float = math.inf         # bytes
    mem_cpu: float = math.inf
    mem_disk: float = math.inf

    def __post_init__(self):
        assert self.peak_flops > 0 and 0 < self.lam <= 1

    @property
    def effective_flops(self) -> float:
        return self.lam * self.peak_flops


@dataclass(frozen=True)
class LinkProfile:
    src: str
    dst: str
    alpha: float      # seconds
    beta: float       # seconds / byte

    def __post_init__(self):
        assert self.alpha >= 0 and self.beta > 0


@dataclass
class NetworkGraph:
    devices: list[DeviceProfile]
    links: dict[tuple[str, str], LinkProfile] = field(default_factory=dict)

    @property
    def n_p(self) -> int:
        return len(self.devices)

    def device(self, device_id) -> DeviceProfile:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def link(self, src, dst) -> LinkProfile:
        return self.links[(src, dst)]


@dataclass(frozen=True)
class OpCost:
    flops: float
    out_bytes: float
    param_bytes: float = 0.0
    acti_bytes: float = 0.0

    @property
    def out_elems(self) -> int:
        return int(self.out_bytes) // BYTES_PER_ELEM


def _need(node: OpNode, *keys):
    vals = []
    for k in keys:
        if k not in node.attrs:
            raise MissingShapeAttr(f"{node.name} ({node.kind}) missing attr {k!r}")
        vals.append(node.attrs[k])
    return vals


def _elem_count(node: OpNode) -> int:
    if "size" in node.attrs:
        return int(node.attrs["size"])
    if "shape" in node.attrs:
        return int(math.prod(node.attrs["shape"]))
    raise MissingShapeAttr(f"{node.name} ({node.kind}) missing attr 'size' or 'shape'")


def estimate_op_cost(node: OpNode, micro_batch_size: int) -> OpCost:
    """Closed-form FLOP and byte estimates for one micro-batch of B samples."""
    B = micro_batch_size
    k = node.kind
    if k == "linear":
        n_in, n_out = _need(node, "in_features", "out_features")
        flops = 2.0 * B * n_in * n_out
        out = B * n_out
        params = n_in * n_out
    elif k == "conv2d":
        cin, cout, ksz, oh, ow = _need(
            node, "in_channels", "out_channels", "kernel_size", "out_h", "out_w"
        )
        flops = 2.0 * B * cout * oh * ow * cin * ksz * ksz
        out = B * cout * oh * ow
        params = cout * cin * ksz * ksz
    elif k in ("relu", "add"):
        n = B * _elem_count(node)
        flops = float(n)
        out = n
        params = 0
    elif k == "cross_entropy":
        (classes,) = _need(node, "classes")
        flops = 5.0 * B * classes  # coarse estimate; comm dominates at scale
        out = 1  # scalar loss, kept non-zero so message passing stays uniform
        params = 0
    elif k == "input":
        flops = 0.0
        out = B * _elem_count(node)
        params = 0
    elif k == "label":
        flops = 0.0
        out = B
        params = 0
    elif k == "tensor":
        n = _elem_count(node)
        flops = 0.0
        out = n
        params = n  # trainable free tensor
    else:
        raise MissingShapeAttr(f"unknown operator kind {k!r} on {node.name}")

    out_bytes = out * BYTES_PER_ELEM
    return OpCost(
        flops=flops,
        out_bytes=out_bytes,
        param_bytes=params * BYTES_PER_ELEM,
        acti_bytes=out_bytes,
    )


def estimate_dag_costs(dag: OpDag, micro_batch_size: int) -> dict[str, OpCost]:
    return {n: estimate_op_cost(node, micro_batch_size) for n, node in dag.nodes.items()}


def compute_time(cost: OpCost, device: DeviceProfile) -> float:
    """C(f, p): FLOPs divided by the scaled-down device speed."""
    return cost.flops / device.effective_flops


def comm_time(link: LinkProfile | None, message_bytes: float) -> float:
    """Alpha-beta message time; self-links (link=None) are free."""
    if link is None or link.src == link.dst:
        return 0.0
    return link.alpha + link.beta * message_bytes


def op_total_time(
    node: OpNode,
    device: DeviceProfile,
    assignment: dict,
    network: NetworkGraph,
    costs: dict[str, OpCost],
) -> float:
    """Total per-op time: remote-parent retrieval plus compute (write time ignored)."""
    if node.name not in assignment:
        raise UnassignedNode(node.name)
    here = assignment[node.name]
    total = compute_time(costs[node.name], device)
    for parent in node.args:
        if parent not in assignment:
            raise UnassignedNode(parent)
        there = assignment[parent]
        if there != here:
            total += comm_time(network.link(there, here), costs[parent].out_bytes)
    return total


def fit_lambda(samples, device: DeviceProfile) -> float:
    """Least-squares fit of the scaling factor from (OpCost, measured seconds) pairs.

    Model: measured ~= flops / (lam * S*). With x = flops/S*, minimizing over
    c = 1/lam gives c = sum(x*y)/sum(x*x), i.e. lam = sum(x*x)/sum(x*y).
    """
    pairs = [(c.flops / device.peak_flops, t) for c, t in samples]
    if len(pairs) < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {len(pairs)}")
    sxx = sum(x * x for x, _ in pairs)
    sxy = sum(x * y for x, y in pairs)
    if sxx == 0 or sxy <= 0:
        raise DegenerateFit("all-zero flops or non-positive measurements")
    return min(1.0, sxx / sxy)
