"""Analytic latency/throughput evaluation of a (DAG, assignment, network) triple."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .costmodel import NetworkGraph, OpCost, comm_time, compute_time
from .errors import InvalidMicroBatchCount, InvalidRatio, UnassignedNode, ZeroTime
from .opdag import OpDag


@dataclass
class StageCosts:
    devices: list
    compute: dict        # device -> C_p seconds
    receive: dict        # device -> R_p seconds (cross-device incoming FP edges)

    def total(self, device) -> float:
        return self.compute[device] + self.receive[device]

    @property
    def bottleneck(self):
        """Device attaining max_p max(C_p, R_p); None when there are no devices."""
        if not self.devices:
            return None
        return max(self.devices, key=lambda d: (max(self.compute[d], self.receive[d]), str(d)))


@dataclass
class ThroughputReport:
    latency_fp: float
    pipeline_time: float
    compressed_pipeline_time: Optional[float]
    throughput: float
    n_b: int
    batch_size: int
    bottleneck_device: Optional[str] = None

    CSV_COLUMNS = (
        "latency_fp,pipeline_time,compressed_pipeline_time,throughput,bottleneck_device"
    )

    def to_dict(self) -> dict:
        return {
            "latency_fp": self.latency_fp,
            "pipeline_time": self.pipeline_time,
            "compressed_pipeline_time": self.compressed_pipeline_time,
            "throughput": self.throughput,
            "n_b": self.n_b,
            "batch_size": self.batch_size,
            "bottleneck_device": self.bottleneck_device,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv_row(self) -> str:
        cpt = "" if self.compressed_pipeline_time is None else repr(self.compressed_pipeline_time)
        return (
            f"{self.latency_fp!r},{self.pipeline_time!r},{cpt},"
            f"{self.throughput!r},{self.bottleneck_device}"
        )


def stage_costs(
    dag: OpDag,
    assignment: dict,
    network: NetworkGraph,
    costs: dict[str, OpCost],
) -> StageCosts:
    """Per-device compute time and cross-device receive time."""
    for name in dag.nodes:
        if name not in assignment:
            raise UnassignedNode(name)
    devices = [d.device_id for d in network.devices]
    C = {d: 0.0 for d in devices}
    R = {d: 0.0 for d in devices}
    for name, node in sorted(dag.nodes.items()):
        dev = assignment[name]
        C[dev] += compute_time(costs[name], network.device(dev))
    for u, v in dag.fp_edges:
        du, dv = assignment[u], assignment[v]
        if du != dv:
            R[dv] += comm_time(network.link(du, dv), costs[u].out_bytes)
    return StageCosts(devices=devices, compute=C, receive=R)


def latency_fp(sc: StageCosts) -> float:
    """One-shot FP latency: sum of per-device compute + receive times."""
    return sum(sc.compute[d] + sc.receive[d] for d in sc.devices)


def _bottleneck_time(sc: StageCosts) -> float:
    if not sc.devices:
        return 0.0
    return max(max(sc.compute[d], sc.receive[d]) for d in sc.devices)


def pipeline_time(sc: StageCosts, n_b: int) -> float:
    """Pipelined FP time: fill latency plus (n_b - 1) bottleneck steps."""
    if n_b < 1:
        raise InvalidMicroBatchCount(n_b)
    return latency_fp(sc) + (n_b - 1) * _bottleneck_time(sc)


def throughput(batch_size: float, pipe_time: float) -> float:
    if pipe_time <= 0:
        raise ZeroTime(pipe_time)
    return batch_size / pipe_time


def compressed_pipeline_time(
    sc: StageCosts,
    n_b: int,
    base_ratio: float,
    per_device_ratios: dict,
    scale_bottleneck_receive: bool = False,
) -> float:
    """Pipelined time with Top-K compression (3x value+index payload expansion).

    Per-device receive terms shrink by 3/r_p; the bubble term shrinks by 3/r.
    `scale_bottleneck_receive` substitutes max(C_p, 3 R_p / r_p) in the bubble
    for sensitivity analysis; the default keeps the published closed form.
    """
    if n_b < 1:
        raise InvalidMicroBatchCount(n_b)
    if base_ratio < 1:
        raise InvalidRatio(base_ratio)
    for d in sc.devices:
        if per_device_ratios.get(d, 1.0) < 1:
            raise InvalidRatio((d, per_device_ratios[d]))
    front = sum(
        sc.compute[d] + 3.0 * sc.receive[d] / per_device_ratios.get(d, 1.0)
        for d in sc.devices
    )
    if not sc.devices:
        return front
    if scale_bottleneck_receive:
        bubble = max(
            max(sc.compute[d], 3.0 * sc.receive[d] / per_device_ratios.get(d, 1.0))
            for d in sc.devices
        ) * (n_b - 1)
        return front + bubble
    return front + 3.0 * (n_b - 1) * _bottleneck_time(sc) / base_ratio


def evaluate(
    dag: OpDag,
    assignment: dict,
    network: NetworkGraph,
    costs: dict[str, OpCost],
    n_b: int,
    batch_size: int,
    base_ratio: float = 1.0,
    per_device_ratios: Optional[dict] = None,
) -> ThroughputReport:
    """Full analytic report for one placement."""
    sc = stage_costs(dag, assignment, network, costs)
    pipe = pipeline_time(sc, n_b)
    compressed = None
    if per_device_ratios is not None:
        compressed = compressed_pipeline_time(sc, n_b, base_ratio, per_device_ratios)
    phi = throughput(batch_size, pipe) if pipe > 0 else 0.0
    return ThroughputReport(
        latency_fp=latency_fp(sc),
        pipeline_time=pipe,
        compressed_pipeline_time=compressed,
        throughput=phi,
        n_b=n_b,
        batch_size=batch_size,
        bottleneck_device=sc.bottleneck,
    )
