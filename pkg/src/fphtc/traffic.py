"""Packets, flows, CoS labels and dataset manipulation."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

TCP = 6

# TCP flag bits
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

DEFAULT_IDLE_TIMEOUT = 600.0


class AppType(enum.Enum):
    CHAT = "CHAT"
    VOIP = "VOIP"
    AUDIO = "AUDIO"
    VIDEO = "VIDEO"
    FTP = "FTP"
    MAIL = "MAIL"
    P2P = "P2P"
    WEB = "WEB"


class CoSLabel(enum.IntEnum):
    DelaySensitive = 0
    DelayModerate = 1
    DelayTolerant = 2


N_CLASSES = len(CoSLabel)

_COS_OF_APP = {
    AppType.CHAT: CoSLabel.DelaySensitive,
    AppType.VOIP: CoSLabel.DelaySensitive,
    AppType.AUDIO: CoSLabel.DelayModerate,
    AppType.VIDEO: CoSLabel.DelayModerate,
    AppType.FTP: CoSLabel.DelayTolerant,
    AppType.MAIL: CoSLabel.DelayTolerant,
    AppType.P2P: CoSLabel.DelayTolerant,
    AppType.WEB: CoSLabel.DelayTolerant,
}


def cos_of_app(app: AppType) -> CoSLabel:
    return _COS_OF_APP[app]


class Direction(enum.IntEnum):
    Forward = 0
    Backward = 1


def ip_to_int(ip: str | int) -> int:
    """Dotted-quad to its big-endian 32-bit integer value."""
    if isinstance(ip, int):
        if not 0 <= ip <= 0xFFFFFFFF:
            raise ValueError(f"IPv4 integer out of range: {ip}")
        return ip
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


class Packet(NamedTuple):
    """One captured packet. Addresses are stored as 32-bit integers."""

    timestamp: float
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    payload_len: int
    tcp_flags: int = ACK
    direction: Direction | None = None
    protocol: int = TCP

    @classmethod
    def make(cls, timestamp, src, sport, dst, dport, payload_len=0, flags=ACK, protocol=TCP):
        return cls(float(timestamp), ip_to_int(src), ip_to_int(dst), int(sport), int(dport),
                   int(payload_len), int(flags), None, int(protocol))

    def reversed(self) -> "Packet":
        return self._replace(src_ip=self.dst_ip, dst_ip=self.src_ip,
                             src_port=self.dst_port, dst_port=self.src_port)

    def is_valid(self) -> bool:
        return (0 <= self.src_port <= 65535 and 0 <= self.dst_port <= 65535
                and 0 <= self.src_ip <= 0xFFFFFFFF and 0 <= self.dst_ip <= 0xFFFFFFFF
                and self.payload_len >= 0 and np.isfinite(self.timestamp))


class FlowKey(NamedTuple):
    ip_a: int
    port_a: int
    ip_b: int
    port_b: int
    protocol: int = TCP


def canonical_flow_key(p: Packet) -> FlowKey:
    if p.protocol != TCP:
        raise ValueError(f"not a TCP packet (protocol {p.protocol})")
    a = (p.src_ip, p.src_port)
    b = (p.dst_ip, p.dst_port)
    if b < a:
        a, b = b, a
    return FlowKey(a[0], a[1], b[0], b[1], TCP)


@dataclass(frozen=True)
class Flow:
    key: FlowKey
    packets: tuple[Packet, ...]
    true_app: AppType | None = None
    teacher_label: CoSLabel | None = None

    def __post_init__(self):
        if not self.packets:
            raise ValueError("flow has no packets")

    @property
    def true_cos(self) -> CoSLabel | None:
        return None if self.true_app is None else cos_of_app(self.true_app)

    @property
    def client(self) -> tuple[int, int]:
        p = self.packets[0]
        return p.src_ip, p.src_port

    @property
    def server(self) -> tuple[int, int]:
        p = self.packets[0]
        return p.dst_ip, p.dst_port

    def with_teacher_label(self, label: CoSLabel) -> "Flow":
        return replace(self, teacher_label=CoSLabel(label))

    def with_app(self, app: AppType) -> "Flow":
        return replace(self, true_app=app)


class LabelKind(enum.Enum):
    Truth = "truth"
    TeacherPredicted = "teacher"


def flow_label(flow: Flow, kind: LabelKind) -> CoSLabel:
    if kind is LabelKind.Truth:
        if flow.true_app is None:
            raise ValueError("flow has no ground-truth application")
        return flow.true_cos
    if flow.teacher_label is None:
        raise ValueError("flow has no teacher label")
    return flow.teacher_label


@dataclass(frozen=True)
class FlowDataset:
    flows: tuple[Flow, ...]
    label_kind: LabelKind = LabelKind.Truth

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        for f in self.flows:
            flow_label(f, self.label_kind)

    def __len__(self):
        return len(self.flows)

    def labels(self) -> list[CoSLabel]:
        return [flow_label(f, self.label_kind) for f in self.flows]

    def class_counts(self) -> dict[CoSLabel, int]:
        counts = {c: 0 for c in CoSLabel}
        for lab in self.labels():
            counts[lab] += 1
        return counts


@dataclass
class AssemblyStats:
    packets_in: int = 0
    malformed: int = 0
    non_tcp: int = 0
    assigned: int = 0
    dropped_flows: int = 0
    dropped_packets: int = 0

    @property
    def kept_packets(self) -> int:
        return self.assigned - self.dropped_packets


@dataclass
class _OpenFlow:
    key: FlowKey
    fwd: tuple[int, int]
    packets: list = field(default_factory=list)
    fin_fwd: bool = False
    fin_bwd: bool = False
    last_ts: float = 0.0


def assemble_flows(packets: Iterable[Packet], idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                   stats: AssemblyStats | None = None, app: AppType | None = None) -> list[Flow]:
    """Group TCP packets into bidirectional flows.

    A flow ends after an RST, after FINs from both endpoints, or when the gap
    to the next packet on its key exceeds ``idle_timeout`` seconds. Flows that
    carry no payload bytes at all are dropped. Flows are returned ordered by
    the timestamp of their first packet.
    """
    if stats is None:
        stats = AssemblyStats()
    ordered = sorted(packets, key=lambda p: p.timestamp)
    open_flows: dict[FlowKey, _OpenFlow] = {}
    done: list[_OpenFlow] = []

    for p in ordered:
        stats.packets_in += 1
        if p.protocol != TCP:
            stats.non_tcp += 1
            continue
        if not p.is_valid():
            stats.malformed += 1
            continue
        key = canonical_flow_key(p)
        cur = open_flows.get(key)
        if cur is not None and p.timestamp - cur.last_ts > idle_timeout:
            done.append(open_flows.pop(key))
            cur = None
        if cur is None:
            cur = _OpenFlow(key, (p.src_ip, p.src_port))
            open_flows[key] = cur
        fwd = (p.src_ip, p.src_port) == cur.fwd
        cur.packets.append(p._replace(direction=Direction.Forward if fwd else Direction.Backward))
        cur.last_ts = p.timestamp
        stats.assigned += 1
        if p.tcp_flags & FIN:
            if fwd:
                cur.fin_fwd = True
            else:
                cur.fin_bwd = True
        if p.tcp_flags & RST or (cur.fin_fwd and cur.fin_bwd):
            done.append(open_flows.pop(key))

    done.extend(open_flows.values())
    done.sort(key=lambda f: (f.packets[0].timestamp, f.key))
    flows = []
    for of in done:
        if sum(p.payload_len for p in of.packets) == 0:
            stats.dropped_flows += 1
            stats.dropped_packets += len(of.packets)
            continue
        flows.append(Flow(of.key, tuple(of.packets), app))
    return flows


def _class_indices(ds: FlowDataset) -> dict[CoSLabel, list[int]]:
    idx: dict[CoSLabel, list[int]] = {c: [] for c in CoSLabel}
    for i, lab in enumerate(ds.labels()):
        idx[lab].append(i)
    return idx


def balance_dataset(ds: FlowDataset, seed: int, classes: Sequence[CoSLabel] | None = None) -> FlowDataset:
    """Upsample every class with replacement to the majority class count.

    Originals are kept; only the shortfall is drawn. ``classes`` restricts the
    classes that must be present (all three by default).
    """
    if len(ds) == 0:
        raise ValueError("cannot balance an empty dataset")
    required = list(CoSLabel) if classes is None else list(classes)
    idx = _class_indices(ds)
    for c in required:
        if not idx[c]:
            raise ValueError(f"class {c.name} has no flows")
    target = max(len(idx[c]) for c in required)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in required:
        members = idx[c]
        chosen.extend(members)
        short = target - len(members)
        if short:
            chosen.extend(int(members[j]) for j in rng.integers(0, len(members), size=short))
    order = rng.permutation(len(chosen))
    return FlowDataset(tuple(ds.flows[chosen[i]] for i in order), ds.label_kind)


def split_dataset(ds: FlowDataset, test_fraction: float, seed: int) -> tuple[FlowDataset, FlowDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(ds) < 2:
        raise ValueError("need at least 2 flows to split")
    n_test = int(round(test_fraction * len(ds)))
    n_test = min(max(n_test, 1), len(ds) - 1)
    perm = np.random.default_rng(seed).permutation(len(ds))
    test = FlowDataset(tuple(ds.flows[i] for i in sorted(perm[:n_test])), ds.label_kind)
    train = FlowDataset(tuple(ds.flows[i] for i in sorted(perm[n_test:])), ds.label_kind)
    return train, test


def shuffle_flows(flows: Sequence[Flow], seed: int) -> list[Flow]:
    perm = np.random.default_rng(seed).permutation(len(flows))
    return [flows[i] for i in perm]
