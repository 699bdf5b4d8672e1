"""Command-line front end: plan / simulate / run / bench over scenario files."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import compressor, executor, opfence, planner, simulator
from .costmodel import comm_time, estimate_dag_costs
from .errors import (
    Deadlock,
    GeopipeError,
    InfeasibleMemory,
    NonFiniteLoss,
    ScenarioSchemaError,
)
from .scenario import COMPRESSIONS, SCHEDULERS, Scenario, load_scenario

log = logging.getLogger("geopipe")

EXIT_SCHEMA = 2
EXIT_MEMORY = 3
EXIT_DEADLOCK = 4
EXIT_NONFINITE = 5


def make_schedule(sc: Scenario, scheduler: str, costs) -> opfence.Schedule:
    devices = [d.device_id for d in sc.network.devices]
    if scheduler == "opfence":
        return opfence.opfence_schedule(
            sc.dag, sc.network, costs, sc.n_b, seed=sc.seed, batch_size=sc.batch_size
        )
    if scheduler == "equal_number":
        sched = opfence.baseline_equal_number(sc.dag, devices)
    elif scheduler == "equal_compute":
        sched = opfence.baseline_equal_compute(sc.dag, devices, costs)
    else:
        raise ValueError(scheduler)
    sched.predicted = planner.evaluate(
        sc.dag, sched.assignment, sc.network, costs, sc.n_b, sc.batch_size
    )
    return sched


def cross_link_times(sc: Scenario, assignment, costs) -> dict:
    """Estimated uncompressed communication seconds per cross-device link."""
    out: dict = {}
    for u, v in sc.dag.fp_edges:
        du, dv = assignment[u], assignment[v]
        if du != dv:
            t = comm_time(sc.network.link(du, dv), costs[u].out_bytes)
            out[(du, dv)] = out.get((du, dv), 0.0) + t
    return out


def make_plan(sc: Scenario, compression: str, assignment, costs, ratio=None):
    if compression == "none":
        return None
    ratio = sc.base_ratio if ratio is None else ratio
    link_R = cross_link_times(sc, assignment, costs)
    if not link_R:
        return None
    if compression == "uniform_topk":
        return compressor.uniform_plan(link_R.keys(), ratio)
    stage = planner.stage_costs(sc.dag, assignment, sc.network, costs)
    return compressor.adatopk_plan(stage, link_R, ratio)


def _write(out_dir: Path, name: str, text: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)
    log.info("wrote %s", out_dir / name)


def _planning_artifacts(sc: Scenario):
    costs = estimate_dag_costs(sc.dag, sc.micro_batch_size)
    sched = make_schedule(sc, sc.scheduler, costs)
    plan = make_plan(sc, sc.compression, sched.assignment, costs)
    stage = planner.stage_costs(sc.dag, sched.assignment, sc.network, costs)
    ratios = compressor.per_device_ratios(plan, [d.device_id for d in sc.network.devices])
    report = planner.evaluate(
        sc.dag,
        sched.assignment,
        sc.network,
        costs,
        sc.n_b,
        sc.batch_size,
        base_ratio=plan.base_ratio if plan else 1.0,
        per_device_ratios=ratios if plan else None,
    )
    sched.predicted = report
    return costs, sched, plan, stage, report


def cmd_plan(sc: Scenario, out_dir: Path) -> int:
    _, sched, plan, _, report = _planning_artifacts(sc)
    doc = sched.to_dict()
    if plan is not None:
        doc["compression_plan"] = plan.to_dict()
    _write(out_dir, "schedule.json", json.dumps(doc, sort_keys=True, indent=2))
    _write(out_dir, "report.json", report.to_json())
    _write(
        out_dir,
        "report.csv",
        planner.ThroughputReport.CSV_COLUMNS + "\n" + report.to_csv_row() + "\n",
    )
    return 0


def cmd_simulate(sc: Scenario, out_dir: Path) -> int:
    costs, sched, plan, _, report = _planning_artifacts(sc)
    trace = simulator.simulate(
        sc.dag, sched, costs, sc.network, sc.n_b, compression_plan=plan
    )
    gap = simulator.analytic_gap(trace, report)
    _write(out_dir, "trace.json", trace.to_json())
    _write(out_dir, "timeline.json", trace.to_chrome_trace())
    _write(
        out_dir,
        "gap.json",
        json.dumps(
            {
                "simulated_makespan": trace.makespan_fp,
                "analytic_pipeline_time": report.pipeline_time,
                "relative_gap": gap,
            },
            sort_keys=True,
            indent=2,
        ),
    )
    return 0


def _synthetic_batch(sc: Scenario, rng) -> dict:
    classes = None
    for node in sc.dag.nodes.values():
        if node.kind == "cross_entropy":
            classes = node.attrs.get("classes")
    batch = {}
    for name, node in sorted(sc.dag.nodes.items()):
        if node.kind == "input":
            shape = node.attrs.get("shape", [node.attrs.get("size", 1)])
            batch[name] = rng.standard_normal((sc.batch_size, *shape))
        elif node.kind == "label":
            n_cls = node.attrs.get("classes", classes or 2)
            batch[name] = rng.integers(0, n_cls, size=sc.batch_size)
    return batch


def cmd_run(sc: Scenario, out_dir: Path, iters: int = 50, lr: float = 0.1) -> int:
    costs = estimate_dag_costs(sc.dag, sc.micro_batch_size)
    sched = make_schedule(sc, sc.scheduler, costs)
    columns = {}
    for mode in COMPRESSIONS:
        plan = make_plan(sc, mode, sched.assignment, costs)
        rng = np.random.default_rng(sc.seed)
        runner = executor.IterationRunner(sc.dag, sched, seed=sc.seed, compression_plan=plan)
        losses = []
        for _ in range(iters):
            batch = _synthetic_batch(sc, rng)
            runner.zero_grad()
            mb_losses = runner.run_iteration(batch, sc.n_b, lr=lr)
            losses.append(sum(mb_losses) / len(mb_losses))
        columns[mode] = losses
    rows = ["iter," + ",".join(COMPRESSIONS)]
    for i in range(iters):
        rows.append(f"{i}," + ",".join(repr(columns[m][i]) for m in COMPRESSIONS))
    _write(out_dir, "loss.csv", "\n".join(rows) + "\n")
    return 0


def cmd_bench(scenario_dir: Path, out_dir: Path) -> int:
    rows = ["scenario,scheduler,compression,simulated_latency"]
    for path in sorted(Path(scenario_dir).glob("*.json")):
        try:
            sc = load_scenario(path)
        except GeopipeError as e:
            rows.append(f"{path.stem},,,error: {e}")
            continue
        costs = estimate_dag_costs(sc.dag, sc.micro_batch_size)
        for scheduler in SCHEDULERS:
            try:
                sched = make_schedule(sc, scheduler, costs)
            except GeopipeError as e:
                for mode in COMPRESSIONS:
                    rows.append(f"{sc.name},{scheduler},{mode},error: {e}")
                continue
            for mode in COMPRESSIONS:
                try:
                    plan = make_plan(sc, mode, sched.assignment, costs)
                    trace = simulator.simulate(
                        sc.dag, sched, costs, sc.network, sc.n_b, compression_plan=plan
                    )
                    rows.append(f"{sc.name},{scheduler},{mode},{trace.makespan_fp!r}")
                except GeopipeError as e:
                    rows.append(f"{sc.name},{scheduler},{mode},error: {e}")
    _write(out_dir, "bench.csv", "\n".join(rows) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geopipe",
        description="Plan, simulate, and numerically execute decentralized "
        "pipelined training scenarios.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override scenario seed")
        sp.add_argument("--scheduler", choices=SCHEDULERS, default=None)
        sp.add_argument("--compression", choices=COMPRESSIONS, default=None)
        sp.add_argument("--ratio", type=float, default=None, help="base compression ratio")

    common(sub.add_parser("plan", help="schedule + analytic throughput report"))
    common(sub.add_parser("simulate", help="discrete-event trace + analytic gap"))
    runp = sub.add_parser("run", help="numeric training iterations on synthetic data")
    common(runp)
    runp.add_argument("--iters", type=int, default=50)
    runp.add_argument("--lr", type=float, default=0.1)
    benchp = sub.add_parser("bench", help="scheduler x compression comparison matrix")
    benchp.add_argument("--scenario-dir", required=True)
    benchp.add_argument("--out", default="out")
    return p


def _apply_overrides(sc: Scenario, args) -> Scenario:
    if args.seed is not None:
        sc.seed = args.seed
    if getattr(args, "scheduler", None):
        sc.scheduler = args.scheduler
    if getattr(args, "compression", None):
        sc.compression = args.compression
    if getattr(args, "ratio", None):
        sc.base_ratio = args.ratio
    return sc


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("OPFENCE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        if args.command == "bench":
            return cmd_bench(Path(args.scenario_dir), out_dir)
        sc = _apply_overrides(load_scenario(args.scenario), args)
        if args.command == "plan":
            return cmd_plan(sc, out_dir)
        if args.command == "simulate":
            return cmd_simulate(sc, out_dir)
        if args.command == "run":
            return cmd_run(sc, out_dir, iters=args.iters, lr=args.lr)
    except ScenarioSchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except InfeasibleMemory as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MEMORY
    except Deadlock as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEADLOCK
    except NonFiniteLoss as e:
        print(f"error: non-finite loss ({e})", file=sys.stderr)
        return EXIT_NONFINITE
    return 0


if __name__ == "__main__":
    sys.exit(main())
