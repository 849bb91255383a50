"""Flow-level statistical features for the flow-based classifier.

The schema has 44 columns. For each of the forward, backward and combined
packet sequences: packet count, payload bytes, payload length
min/max/mean/variance/stddev and inter-arrival min/max/mean/variance. Then
flow duration, packet and byte rates, backward/forward packet and byte
ratios, the forward endpoint's address and port, the backward endpoint's
address and port, and one presence flag per direction.

Statistics over empty sequences are 0; inter-arrival statistics need at
least two packets and are 0 otherwise. Variances divide by the count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .traffic import Direction, Flow

SCHEMA_NAME = "fphtc-flow-features"
SCHEMA_VERSION = 1

_GROUP_STATS = [
    ("pkt_count", "number of packets", "packets"),
    ("payload_bytes", "total payload bytes", "bytes"),
    ("payload_len_min", "smallest payload length", "bytes"),
    ("payload_len_max", "largest payload length", "bytes"),
    ("payload_len_mean", "mean payload length", "bytes"),
    ("payload_len_var", "payload length variance", "bytes^2"),
    ("payload_len_std", "payload length standard deviation", "bytes"),
    ("iat_min", "smallest inter-arrival gap", "s"),
    ("iat_max", "largest inter-arrival gap", "s"),
    ("iat_mean", "mean inter-arrival gap", "s"),
    ("iat_var", "inter-arrival gap variance", "s^2"),
]
_GROUPS = [("fwd_", "forward"), ("bwd_", "backward"), ("", "all")]
_FLOW_LEVEL = [
    ("duration", "last minus first timestamp", "s"),
    ("pkts_per_s", "packets per second of duration", "packets/s"),
    ("bytes_per_s", "payload bytes per second of duration", "bytes/s"),
    ("down_up_pkt_ratio", "backward over forward packet count", "ratio"),
    ("down_up_byte_ratio", "backward over forward payload bytes", "ratio"),
    ("src_ip", "forward endpoint IPv4 address as an integer", "decimal"),
    ("dst_ip", "backward endpoint IPv4 address as an integer", "decimal"),
    ("src_port", "forward endpoint port", "port"),
    ("dst_port", "backward endpoint port", "port"),
    ("fwd_present", "1 if any forward packet", "flag"),
    ("bwd_present", "1 if any backward packet", "flag"),
]


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    description: str
    unit: str


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    name: str = SCHEMA_NAME
    version: int = SCHEMA_VERSION

    @property
    def dimension(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)


def _build_schema() -> FeatureSchema:
    specs = []
    for prefix, label in _GROUPS:
        for stat, desc, unit in _GROUP_STATS:
            specs.append(FeatureSpec(prefix + stat, f"{desc} ({label} packets)", unit))
    specs.extend(FeatureSpec(*row) for row in _FLOW_LEVEL)
    names = [s.name for s in specs]
    assert len(set(names)) == len(names)
    return FeatureSchema(tuple(specs))


_SCHEMA = _build_schema()


def schema() -> FeatureSchema:
    return _SCHEMA


def _mean_var(xs: list) -> tuple[float, float]:
    n = len(xs)
    if n == 0:
        return 0.0, 0.0
    m = sum(xs) / n
    if n == 1:
        return float(m), 0.0
    return float(m), float(sum((x - m) ** 2 for x in xs) / n)


def _group_stats(times: list, lens: list) -> list[float]:
    n = len(lens)
    if n == 0:
        return [0.0] * len(_GROUP_STATS)
    mean, var = _mean_var(lens)
    gaps = [b - a for a, b in zip(times, times[1:])]
    if gaps:
        gmean, gvar = _mean_var(gaps)
        iat = [min(gaps), max(gaps), gmean, gvar]
    else:
        iat = [0.0, 0.0, 0.0, 0.0]
    return [float(n), float(sum(lens)), float(min(lens)), float(max(lens)),
            mean, var, math.sqrt(var)] + iat


def extract_features(flow: Flow) -> np.ndarray:
    """Feature vector of one flow, ordered as ``schema().names``."""
    ft, fl, bt, bl, at, al = [], [], [], [], [], []
    t0 = flow.packets[0].timestamp
    for p in flow.packets:
        t = p.timestamp - t0
        at.append(t)
        al.append(p.payload_len)
        if p.direction == Direction.Backward:
            bt.append(t)
            bl.append(p.payload_len)
        else:
            ft.append(t)
            fl.append(p.payload_len)

    first = flow.packets[0]
    if first.direction == Direction.Backward:
        fwd_end = (first.dst_ip, first.dst_port)
        bwd_end = (first.src_ip, first.src_port)
    else:
        fwd_end = (first.src_ip, first.src_port)
        bwd_end = (first.dst_ip, first.dst_port)

    values = _group_stats(ft, fl) + _group_stats(bt, bl) + _group_stats(at, al)
    duration = at[-1] - at[0]
    total_bytes = float(sum(al))
    fwd_bytes, bwd_bytes = float(sum(fl)), float(sum(bl))
    values += [
        duration,
        len(al) / duration if duration > 0 else 0.0,
        total_bytes / duration if duration > 0 else 0.0,
        len(bl) / len(fl) if fl else 0.0,
        bwd_bytes / fwd_bytes if fwd_bytes > 0 else 0.0,
        float(fwd_end[0]), float(bwd_end[0]), float(fwd_end[1]), float(bwd_end[1]),
        1.0 if fl else 0.0,
        1.0 if bl else 0.0,
    ]
    return np.asarray(values, dtype=np.float64)


def feature_matrix(flows: Sequence[Flow]) -> np.ndarray:
    if not flows:
        return np.zeros((0, _SCHEMA.dimension))
    return np.vstack([extract_features(f) for f in flows])


def export_feature_csv(flows: Sequence[Flow], labels: Sequence, path) -> None:
    """One row per flow, header = schema names, final column = label name."""
    if len(flows) != len(labels):
        raise ValueError("flows and labels differ in length")
    X = feature_matrix(flows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SCHEMA.names + ["label"])
        for row, lab in zip(X, labels):
            w.writerow([repr(float(v)) for v in row] + [getattr(lab, "name", lab)])
