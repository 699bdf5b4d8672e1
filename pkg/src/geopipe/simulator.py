"""Discrete-event simulation of pipelined micro-batch execution under a schedule.

Resource model: one op at a time per device, one in-flight message per directed
link (FIFO). Fill-drain pipelining: all micro-batches finish FP before any BP
starts. The default simulates FP only, which is what the analytic closed forms
describe; pass phases=("fp", "bp") for a full iteration timeline.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Optional

from .compressor import CompressionPlan, select_k, INDEX_BYTES, VALUE_BYTES
from .costmodel import (
    BP_FLOPS_FACTOR,
    BYTES_PER_ELEM,
    NetworkGraph,
    OpCost,
    comm_time,
)
from .errors import Deadlock
from .opdag import OpDag, derive_bp_edges, topological_order
from .opfence import Schedule
from .planner import ThroughputReport

_PHASE_ORDER = {"fp": 0, "bp": 1}


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str               # OpStart | OpFinish | MsgSend | MsgArrive
    ref: str                # op name, or "src->dst:producer" for messages
    micro_batch: int
    phase: str              # fp | bp

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "kind": self.kind,
            "ref": self.ref,
            "micro_batch": self.micro_batch,
            "phase": self.phase,
        }


@dataclass
class SimTrace:
    events: list
    makespan: float
    busy: dict                 # device -> {"fp": s, "bp": s}
    link_bytes: dict           # (src, dst) -> bytes transferred
    makespan_fp: float = 0.0

    def idle(self, device) -> float:
        return self.makespan - sum(self.busy[device].values())

    def to_json(self) -> str:
        return json.dumps(
            {
                "makespan": self.makespan,
                "makespan_fp": self.makespan_fp,
                "busy": {str(d): b for d, b in sorted(self.busy.items())},
                "link_bytes": {f"{s}->{d}": b for (s, d), b in sorted(self.link_bytes.items())},
                "events": [e.to_dict() for e in self.events],
            },
            sort_keys=True,
            indent=2,
        )

    def to_chrome_trace(self) -> str:
        """Chrome trace-format JSON (complete 'X' events, microsecond scale)."""
        out = []
        starts = {}
        for e in self.events:
            key = (e.ref, e.micro_batch, e.phase)
            if e.kind in ("OpStart", "MsgSend"):
                starts[key] = e.time
            elif e.kind in ("OpFinish", "MsgArrive"):
                t0 = starts.pop(key, e.time)
                out.append(
                    {
                        "name": f"{e.ref} mb{e.micro_batch}",
                        "cat": e.phase,
                        "ph": "X",
                        "ts": t0 * 1e6,
                        "dur": (e.time - t0) * 1e6,
                        "pid": 0,
                        "tid": e.ref.split("->")[0] if "->" in e.ref else e.ref,
                    }
                )
        return json.dumps({"traceEvents": out}, sort_keys=True)


def _message_bytes(out_bytes: float, link, plan: Optional[CompressionPlan]) -> float:
    if plan is None:
        return out_bytes
    ratio = plan.ratio_for(link[0], link[1])
    if ratio <= 1.0:
        return out_bytes
    elems = max(1, int(out_bytes) // BYTES_PER_ELEM)
    return select_k(elems, ratio) * (VALUE_BYTES + INDEX_BYTES)


def simulate(
    dag: OpDag,
    schedule: Schedule,
    costs: dict[str, OpCost],
    network: NetworkGraph,
    n_b: int,
    compression_plan: Optional[CompressionPlan] = None,
    phases: tuple = ("fp",),
) -> SimTrace:
    assignment = schedule.assignment
    topo = topological_order(dag)
    bp_edges = derive_bp_edges(dag)

    # Task table: (phase, mb, op) -> remaining deps, duration, device.
    tasks: dict = {}
    dependents: dict = {}      # task -> list of (task | message) fired on completion
    messages: dict = {}        # message id -> (link, nbytes, target task)

    def add_task(key, duration):
        tasks[key] = {"deps": 0, "dur": duration, "dev": assignment[key[2]]}
        dependents.setdefault(key, [])

    def device_speed(name):
        return network.device(assignment[name]).effective_flops

    run_bp = "bp" in phases
    for mb in range(n_b):
        for name in topo:
            add_task(("fp", mb, name), costs[name].flops / device_speed(name))
    bp_nodes = sorted({u for (u, _) in bp_edges} | {v for (_, v) in bp_edges}) if run_bp else []
    for mb in range(n_b):
        for name in bp_nodes:
            add_task(
                ("bp", mb, name),
                BP_FLOPS_FACTOR * costs[name].flops / device_speed(name),
            )

    msg_seq = 0

    def wire(src_task, dst_task, producer_name, payload_bytes):
        """Dependency from src to dst, via the network when devices differ."""
        nonlocal msg_seq
        tasks[dst_task]["deps"] += 1
        du, dv = tasks[src_task]["dev"], tasks[dst_task]["dev"]
        if du == dv:
            dependents[src_task].append(("task", dst_task))
        elif (du, dv) not in network.links:
            # No route for this payload: the consumer's dependency can never be
            # satisfied, which the drain check below reports as a Deadlock.
            pass
        else:
            mid = (du, dv, producer_name, dst_task[0], dst_task[1], msg_seq)
            msg_seq += 1
            nbytes = _message_bytes(payload_bytes, (du, dv), compression_plan)
            messages[mid] = {"link": (du, dv), "bytes": nbytes, "target": dst_task}
            dependents[src_task].append(("msg", mid))

    for mb in range(n_b):
        for u, v in dag.fp_edges:
            wire(("fp", mb, u), ("fp", mb, v), u, costs[u].out_bytes)
    if run_bp:
        # Gradient of u's output flows consumer -> producer; payload matches the
        # FP activation shape of u.
        for mb in range(n_b):
            for v, u in bp_edges:       # bp edge: consumer v back to producer u
                if ("bp", mb, v) in tasks and ("bp", mb, u) in tasks:
                    wire(("bp", mb, v), ("bp", mb, u), u, costs[u].out_bytes)
        # Fill-drain barrier: every BP task additionally waits for all FP work.
        barrier_pending = len([k for k in tasks if k[0] == "fp"])
        for key in tasks:
            if key[0] == "bp":
                tasks[key]["deps"] += 1

    # --- event loop ---------------------------------------------------------
    events: list[SimEvent] = []
    busy = {d.device_id: {"fp": 0.0, "bp": 0.0} for d in network.devices}
    link_bytes: dict = {}
    device_free = {d.device_id: 0.0 for d in network.devices}
    link_free: dict = {}
    ready: list = []           # heap of (time, phase order, mb, name, key)
    done = 0
    makespan = 0.0
    makespan_fp = 0.0
    fp_done = 0
    fp_total = sum(1 for k in tasks if k[0] == "fp")
    bp_released = not run_bp

    def push_ready(key, t):
        ph, mb, name = key
        heapq.heappush(ready, (t, _PHASE_ORDER[ph], mb, name, key))

    for key, t in tasks.items():
        if t["deps"] == 0 and (key[0] == "fp" or not run_bp):
            push_ready(key, 0.0)

    def complete(key, finish):
        """Propagate a task completion; returns message arrivals to schedule."""
        nonlocal fp_done, bp_released, makespan_fp
        for dep_kind, ref in dependents[key]:
            if dep_kind == "task":
                t = tasks[ref]
                t["deps"] -= 1
                if t["deps"] == 0:
                    push_ready(ref, finish)
            else:
                m = messages[ref]
                link = m["link"]
                start = max(finish, link_free.get(link, 0.0))
                dur = comm_time(network.link(*link), m["bytes"])
                link_free[link] = start + dur
                link_bytes[link] = link_bytes.get(link, 0.0) + m["bytes"]
                tgt = m["target"]
                events.append(
                    SimEvent(start, "MsgSend", f"{link[0]}->{link[1]}:{key[2]}", tgt[1], tgt[0])
                )
                events.append(
                    SimEvent(
                        start + dur, "MsgArrive", f"{link[0]}->{link[1]}:{key[2]}", tgt[1], tgt[0]
                    )
                )
                t = tasks[tgt]
                t["deps"] -= 1
                if t["deps"] == 0:
                    push_ready(tgt, start + dur)
        if key[0] == "fp":
            fp_done += 1
            makespan_fp = max(makespan_fp, finish)
            if run_bp and fp_done == fp_total and not bp_released:
                bp_released = True
                for k2, t2 in tasks.items():
                    if k2[0] == "bp":
                        t2["deps"] -= 1
                        if t2["deps"] == 0:
                            push_ready(k2, finish)

    while ready:
        t, _, mb, name, key = heapq.heappop(ready)
        task = tasks[key]
        dev = task["dev"]
        start = max(t, device_free[dev])
        finish = start + task["dur"]
        device_free[dev] = finish
        busy[dev][key[0]] += task["dur"]
        events.append(SimEvent(start, "OpStart", name, mb, key[0]))
        events.append(SimEvent(finish, "OpFinish", name, mb, key[0]))
        makespan = max(makespan, finish)
        done += 1
        complete(key, finish)

    expected = fp_total + (len(bp_nodes) * n_b if run_bp else 0)
    if done != expected:
        blocked = [k for k, t in tasks.items() if t["deps"] > 0]
        raise Deadlock(sorted(str(k) for k in blocked))

    events.sort(key=lambda e: (e.time, e.kind, e.phase, e.micro_batch, e.ref))
    return SimTrace(
        events=events,
        makespan=makespan,
        busy=busy,
        link_bytes=link_bytes,
        makespan_fp=makespan_fp,
    )


def analytic_gap(trace: SimTrace, report: ThroughputReport) -> float:
    """Relative error of the analytic pipeline time vs the simulated FP makespan."""
    sim = trace.makespan_fp
    if sim == 0:
        return 0.0
    return abs(sim - report.pipeline_time) / sim
