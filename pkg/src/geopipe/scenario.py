"""Scenario files: the versioned JSON input consumed by every CLI command."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .costmodel import DeviceProfile, LinkProfile, NetworkGraph
from .errors import ScenarioSchemaError
from .opdag import OpDag, build_dag

SCHEMA_VERSION = 1

SCHEDULERS = ("opfence", "equal_number", "equal_compute")
COMPRESSIONS = ("none", "uniform_topk", "adatopk")


@dataclass
class Scenario:
    name: str
    dag: OpDag
    network: NetworkGraph
    n_b: int
    micro_batch_size: int
    batch_size: int                      # N_s = micro_batch_size * n_b
    base_ratio: float
    scheduler: str
    compression: str
    seed: int
    raw: dict = field(default_factory=dict)


def _require(doc: dict, key, typ, ctx=""):
    path = f"{ctx}.{key}" if ctx else key
    if key not in doc:
        raise ScenarioSchemaError(path, "missing")
    val = doc[key]
    if typ is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ScenarioSchemaError(path, f"expected number, got {type(val).__name__}")
    elif not isinstance(val, typ):
        raise ScenarioSchemaError(path, f"expected {typ.__name__}, got {type(val).__name__}")
    return val


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioSchemaError(str(path), f"invalid JSON: {e}")
    return parse_scenario(doc, name=path.stem)


def parse_scenario(doc: dict, name: str = "scenario") -> Scenario:
    schema = _require(doc, "schema", int)
    if schema != SCHEMA_VERSION:
        raise ScenarioSchemaError("schema", f"unsupported version {schema}")

    node_docs = _require(doc, "dag", list)
    specs = []
    for i, nd in enumerate(node_docs):
        ctx = f"dag[{i}]"
        specs.append(
            dict(
                name=_require(nd, "name", str, ctx),
                kind=_require(nd, "kind", str, ctx),
                args=tuple(nd.get("args", [])),
                attrs=dict(nd.get("attrs", {})),
            )
        )
    dag = build_dag(specs)

    dev_docs = _require(doc, "devices", list)
    if not dev_docs:
        raise ScenarioSchemaError("devices", "at least one device required")
    devices = []
    for i, dd in enumerate(dev_docs):
        ctx = f"devices[{i}]"
        devices.append(
            DeviceProfile(
                device_id=_require(dd, "id", str, ctx),
                peak_flops=_require(dd, "peak_flops", float, ctx),
                lam=dd.get("lambda", 1.0),
                mem_gpu=dd.get("mem_gpu") if dd.get("mem_gpu") is not None else math.inf,
                mem_cpu=dd.get("mem_cpu") if dd.get("mem_cpu") is not None else math.inf,
                mem_disk=dd.get("mem_disk") if dd.get("mem_disk") is not None else math.inf,
            )
        )
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ScenarioSchemaError("devices", "duplicate device ids")

    links = {}
    for i, ld in enumerate(doc.get("links", [])):
        ctx = f"links[{i}]"
        src = _require(ld, "src", str, ctx)
        dst = _require(ld, "dst", str, ctx)
        if src not in ids or dst not in ids:
            raise ScenarioSchemaError(ctx, f"unknown device in link {src}->{dst}")
        link = LinkProfile(
            src=src,
            dst=dst,
            alpha=_require(ld, "alpha", float, ctx),
            beta=_require(ld, "beta", float, ctx),
        )
        links[(src, dst)] = link
        # A single row covers both directions unless overridden later.
        if ld.get("symmetric", True) and (dst, src) not in links:
            links[(dst, src)] = LinkProfile(src=dst, dst=src, alpha=link.alpha, beta=link.beta)
    for a in ids:
        for b in ids:
            if a != b and (a, b) not in links:
                raise ScenarioSchemaError("links", f"missing link {a}->{b}")

    n_b = _require(doc, "n_b", int)
    if n_b < 1:
        raise ScenarioSchemaError("n_b", "must be >= 1")
    mbs = _require(doc, "micro_batch_size", int)
    if mbs < 1:
        raise ScenarioSchemaError("micro_batch_size", "must be >= 1")
    batch = doc.get("batch_size", mbs * n_b)
    if batch != mbs * n_b:
        raise ScenarioSchemaError("batch_size", f"must equal micro_batch_size * n_b = {mbs * n_b}")

    scheduler = doc.get("scheduler", "opfence")
    if scheduler not in SCHEDULERS:
        raise ScenarioSchemaError("scheduler", f"must be one of {SCHEDULERS}")
    compression = doc.get("compression", "none")
    if compression not in COMPRESSIONS:
        raise ScenarioSchemaError("compression", f"must be one of {COMPRESSIONS}")
    ratio = doc.get("ratio", 1.0)
    if not isinstance(ratio, (int, float)) or ratio < 1:
        raise ScenarioSchemaError("ratio", "must be a number >= 1")

    return Scenario(
        name=name,
        dag=dag,
        network=NetworkGraph(devices=devices, links=links),
        n_b=n_b,
        micro_batch_size=mbs,
        batch_size=batch,
        base_ratio=float(ratio),
        scheduler=scheduler,
        compression=compression,
        seed=doc.get("seed", 0),
        raw=doc,
    )
