"""Top-K sparsification of dense vectors and adaptive per-link ratio assignment."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyVector, IndexOutOfRange, InvalidRatio, NoCommunication

VALUE_BYTES = 4   # float32 values on the wire
INDEX_BYTES = 8   # int64 indices on the wire
# Dense elements are 4 bytes, so a kept element costs 3x its dense size.
SPARSE_EXPANSION = (VALUE_BYTES + INDEX_BYTES) / VALUE_BYTES


@dataclass
class SparsePayload:
    values: np.ndarray        # kept entries, in index order; dtype preserved
    indices: np.ndarray       # strictly increasing positions, int64
    original_len: int

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def ratio_used(self) -> float:
        return self.original_len / self.k

    @property
    def payload_nbytes(self) -> int:
        """Wire accounting for the values+indices body (excludes the 16B header)."""
        return self.k * (VALUE_BYTES + INDEX_BYTES)

    def to_bytes(self) -> bytes:
        """Little-endian frame: {d: u64, k: u64}, k x u64 indices, k x f32 values."""
        head = struct.pack("<QQ", self.original_len, self.k)
        idx = np.ascontiguousarray(self.indices, dtype="<i8").tobytes()
        vals = np.ascontiguousarray(self.values, dtype="<f4").tobytes()
        return head + idx + vals

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SparsePayload":
        d, k = struct.unpack_from("<QQ", raw, 0)
        off = 16
        indices = np.frombuffer(raw, dtype="<i8", count=k, offset=off).astype(np.int64)
        off += k * INDEX_BYTES
        values = np.frombuffer(raw, dtype="<f4", count=k, offset=off).astype(np.float64)
        return cls(values=values, indices=indices, original_len=d)


@dataclass
class CompressionPlan:
    base_ratio: float
    per_link: dict                      # (src, dst) -> ratio >= 1
    R_estimates: dict = field(default_factory=dict)

    def ratio_for(self, src, dst) -> float:
        return self.per_link.get((src, dst), 1.0)

    def to_dict(self) -> dict:
        return {
            "base_ratio": self.base_ratio,
            "per_link": {f"{s}->{d}": r for (s, d), r in sorted(self.per_link.items())},
            "R_estimates": {str(k): v for k, v in sorted(self.R_estimates.items())},
        }


def select_k(d: int, ratio: float) -> int:
    if ratio < 1:
        raise InvalidRatio(ratio)
    return max(1, math.floor(d / ratio))


def topk_compress(vector, ratio: float) -> SparsePayload:
    """Keep the k = max(1, floor(d/ratio)) largest-magnitude entries.

    Magnitude ties keep the lower index. Values are stored in index order with
    their original dtype (the f32 cast happens only at byte serialization).
    """
    v = np.asarray(vector)
    flat = v.reshape(-1)
    d = flat.size
    if d == 0:
        raise EmptyVector("cannot compress a zero-length vector")
    k = select_k(d, ratio)
    # Stable sort on -|v| keeps the lower index first among equal magnitudes.
    order = np.argsort(-np.abs(flat), kind="stable")
    kept = np.sort(order[:k]).astype(np.int64)
    return SparsePayload(values=flat[kept].copy(), indices=kept, original_len=d)


def topk_decompress(payload: SparsePayload):
    """Dense length-d vector: kept values at their indices, zero elsewhere."""
    if payload.k and (payload.indices.min() < 0 or payload.indices.max() >= payload.original_len):
        raise IndexOutOfRange(payload.indices)
    out = np.zeros(payload.original_len, dtype=np.asarray(payload.values).dtype)
    out[payload.indices] = payload.values
    return out


def wire_bytes(d: int, ratio: float) -> int:
    """Bytes on the wire for a compressed length-d vector (12 bytes per kept entry)."""
    return select_k(d, ratio) * (VALUE_BYTES + INDEX_BYTES)


def adatopk_plan(stage_costs, cross_link_R: dict, base_ratio: float) -> CompressionPlan:
    """Per-link ratios: r_i = max(1, 3 r * R_i / max R), heaviest link gets 3r.

    `cross_link_R` maps each cross-device (src, dst) link to its estimated
    communication time; links below the max get proportionally lighter
    compression, clamped at 1 (uncompressed).
    """
    if base_ratio < 1:
        raise InvalidRatio(base_ratio)
    r_max = max(cross_link_R.values(), default=0.0)
    if r_max <= 0:
        raise NoCommunication("all link communication estimates are zero")
    per_link = {
        link: max(1.0, 3.0 * base_ratio * r / r_max) for link, r in cross_link_R.items()
    }
    estimates = dict(cross_link_R)
    if stage_costs is not None:
        estimates.update({d: stage_costs.receive[d] for d in stage_costs.devices})
    return CompressionPlan(base_ratio=base_ratio, per_link=per_link, R_estimates=estimates)


def uniform_plan(cross_links, base_ratio: float) -> CompressionPlan:
    """Uniform Top-K: every cross-device link compresses at the base ratio."""
    if base_ratio < 1:
        raise InvalidRatio(base_ratio)
    return CompressionPlan(
        base_ratio=base_ratio,
        per_link={link: float(base_ratio) for link in cross_links},
    )


def per_device_ratios(plan: Optional[CompressionPlan], devices) -> dict:
    """Collapse per-link ratios to the receiver device (min ratio = worst case)."""
    out = {d: 1.0 for d in devices}
    if plan is None:
        return out
    for (_, dst), r in plan.per_link.items():
        if dst in out:
            out[dst] = r if out[dst] == 1.0 else min(out[dst], r)
    return out
