"""Seeded synthetic traffic with per-application statistical and header signatures.

Each flow is a client talking to a server. The server address comes from the
application's /24 subnet pool and the server port from its port pool, so the
packet headers carry class signal. Clients are drawn from a pool shared by
all applications.

Applications are hosted in pairs (CHAT/WEB, VOIP/MAIL, VIDEO/P2P, AUDIO/FTP):
both members of a pair share the same server /24 subnets and belong to
different CoS classes, the first member on hosts .1-.8 and the second on
.9-.16. Every application serves on the same web ports. A router policy
therefore has to learn each half-subnet, and a policy that never saw one
member of a pair routes it like its partner.

Profile files are YAML (or JSON) with this layout::

    clients: ["10.1.2.0/24", ...]          # optional, shared client subnets
    apps:
      VOIP:
        packet_count: {mu: 2.3, sigma: 0.5}   # log-normal count of data packets
        fwd_len: {mean: 250, std: 25}         # client-to-server payload bytes
        bwd_len: {mean: 1050, std: 25}        # server-to-client payload bytes
        iat_rate: 20.0                        # exponential inter-arrival rate, 1/s
        forward_fraction: 0.5                 # share of data packets sent by the client
        ports: [443, 8443, 80]
        subnets: ["23.4.5.0/24", ...]
        hosts: [1, 8]                         # optional, server host octet range
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .traffic import ACK, FIN, PSH, SYN, TCP, AppType, Direction, Flow, Packet, canonical_flow_key

MAX_PAYLOAD = 1460
MAX_DATA_PACKETS = 400
SERVER_HOSTS = 16
FLOW_RATE = 50.0  # new flows per second

CO_HOSTED = [
    (AppType.CHAT, AppType.WEB),
    (AppType.VOIP, AppType.MAIL),
    (AppType.VIDEO, AppType.P2P),
    (AppType.AUDIO, AppType.FTP),
]
WEB_PORTS = (443, 8443, 80)


def _subnet_to_int(s) -> int:
    if isinstance(s, int):
        return s & 0xFFFFFF00
    net = s.split("/")[0]
    a, b, c, d = (int(x) for x in net.split("."))
    return (a << 24) | (b << 16) | (c << 8)


def _int_to_subnet(v: int) -> str:
    return f"{v >> 24}.{(v >> 16) & 255}.{(v >> 8) & 255}.0/24"


@dataclass(frozen=True)
class SyntheticProfile:
    packet_count_mu: float
    packet_count_sigma: float
    fwd_len_mean: float
    fwd_len_std: float
    bwd_len_mean: float
    bwd_len_std: float
    iat_rate: float
    forward_fraction: float
    port_pool: tuple[int, ...]
    subnet_pool: tuple[int, ...]
    host_range: tuple[int, int] = (1, SERVER_HOSTS)

    def __post_init__(self):
        nums = [self.packet_count_mu, self.packet_count_sigma, self.fwd_len_mean, self.fwd_len_std,
                self.bwd_len_mean, self.bwd_len_std, self.iat_rate, self.forward_fraction]
        if not all(math.isfinite(v) for v in nums):
            raise ValueError("profile parameters must be finite")
        if self.packet_count_sigma < 0 or self.fwd_len_std < 0 or self.bwd_len_std < 0:
            raise ValueError("standard deviations must be >= 0")
        if self.fwd_len_mean <= 0 or self.bwd_len_mean <= 0 or self.iat_rate <= 0:
            raise ValueError("length means and the inter-arrival rate must be positive")
        if not 0.0 < self.forward_fraction < 1.0:
            raise ValueError("forward_fraction must lie in (0, 1)")
        object.__setattr__(self, "port_pool", tuple(int(p) for p in self.port_pool))
        object.__setattr__(self, "subnet_pool", tuple(_subnet_to_int(s) for s in self.subnet_pool))
        if any(not 0 <= p <= 65535 for p in self.port_pool):
            raise ValueError("port out of range")
        lo, hi = (int(v) for v in self.host_range)
        if not 1 <= lo <= hi <= 254:
            raise ValueError("host_range must satisfy 1 <= lo <= hi <= 254")
        object.__setattr__(self, "host_range", (lo, hi))

    @property
    def is_empty(self) -> bool:
        return not self.port_pool or not self.subnet_pool


@dataclass(frozen=True)
class TrafficPreset:
    name: str
    profiles: dict = field(hash=False)
    client_subnets: tuple[int, ...] = ()


def _layout(rng: np.random.Generator, n_groups: int, per_group: int) -> list[list[int]]:
    """Disjoint random public /24 prefixes, ``per_group`` for each hosting group."""
    lo, hi = 11 << 16, 224 << 16
    chosen: set[int] = set()
    order: list[int] = []
    while len(order) < n_groups * per_group:
        v = int(rng.integers(lo, hi))
        if v >> 16 in (127,) or v in chosen:
            continue
        chosen.add(v)
        order.append(v << 8)
    return [order[i * per_group:(i + 1) * per_group] for i in range(n_groups)]


def _client_layout(rng: np.random.Generator, n: int = 64) -> tuple[int, ...]:
    picks = rng.choice(1 << 16, size=n, replace=False)
    return tuple(int((10 << 24) | (int(v) << 8)) for v in picks)


def build_preset(name: str, subnets_per_group: int = 90, layout_seed: int = 20) -> TrafficPreset:
    """Build one of the named presets.

    ``separable``: per-application payload, timing and direction statistics
    sit many standard deviations apart. ``overlapping``: the per-application
    means lie within one standard deviation of each other.
    """
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    rng = np.random.default_rng(layout_seed)
    groups = _layout(rng, len(CO_HOSTED), subnets_per_group)
    clients = _client_layout(rng)
    subnet_of, hosts_of = {}, {}
    half = SERVER_HOSTS // 2
    for pair, nets in zip(CO_HOSTED, groups):
        for j, app in enumerate(pair):
            subnet_of[app] = tuple(nets)
            hosts_of[app] = (1 + j * half, (j + 1) * half)
    profiles = {}
    for i, app in enumerate(AppType):
        ports = WEB_PORTS
        if name == "separable":
            prof = SyntheticProfile(
                packet_count_mu=math.log(6 + 2 * i), packet_count_sigma=0.4,
                fwd_len_mean=80 + 170 * i, fwd_len_std=25,
                bwd_len_mean=1250 - 150 * i, bwd_len_std=25,
                iat_rate=50.0 / 2.2 ** i, forward_fraction=0.3 + 0.05 * i,
                port_pool=ports, subnet_pool=subnet_of[app], host_range=hosts_of[app])
        else:
            prof = SyntheticProfile(
                packet_count_mu=math.log(10), packet_count_sigma=0.5,
                fwd_len_mean=400 + 25 * i, fwd_len_std=200,
                bwd_len_mean=700 - 25 * i, bwd_len_std=200,
                iat_rate=5.0 * (1 + 0.05 * i), forward_fraction=0.45 + 0.01 * i,
                port_pool=ports, subnet_pool=subnet_of[app], host_range=hosts_of[app])
        profiles[app] = prof
    return TrafficPreset(name, profiles, clients)


PRESET_NAMES = ("separable", "overlapping")
_PRESET_CACHE: dict = {}


def preset(name: str) -> TrafficPreset:
    if name not in _PRESET_CACHE:
        _PRESET_CACHE[name] = build_preset(name)
    return _PRESET_CACHE[name]


def generate_synthetic(profiles: Mapping[AppType, SyntheticProfile], app_mix: Mapping[AppType, float],
                       n_flows: int, seed: int, client_subnets=None,
                       start_time: float = 0.0) -> list[Flow]:
    """Draw ``n_flows`` labeled flows; fully determined by the arguments.

    Each flow is a client SYN, data packets (the first one from the client),
    then a FIN from each side. Timestamps are whole microseconds.
    """
    if n_flows < 1:
        raise ValueError("n_flows must be >= 1")
    apps = [a for a in AppType if app_mix.get(a, 0) > 0]
    weights = np.array([float(app_mix[a]) for a in apps])
    if any(float(w) < 0 for w in app_mix.values()):
        raise ValueError("application weights must be nonnegative")
    if not apps or weights.sum() <= 0:
        raise ValueError("application weights must sum to a positive value")
    for a in apps:
        if a not in profiles or profiles[a].is_empty:
            raise ValueError(f"application {a.name} is weighted but has an empty profile")
    if client_subnets is None:
        client_subnets = preset("separable").client_subnets
    clients = np.asarray(client_subnets, dtype=np.int64)

    rng = np.random.default_rng(seed)
    prof = [profiles[a] for a in apps]
    app_idx = rng.choice(len(apps), size=n_flows, p=weights / weights.sum())
    mu = np.array([p.packet_count_mu for p in prof])[app_idx]
    sigma = np.array([p.packet_count_sigma for p in prof])[app_idx]
    counts = np.clip(np.rint(np.exp(mu + sigma * rng.standard_normal(n_flows))), 1, MAX_DATA_PACKETS).astype(np.int64)

    total = int(counts.sum())
    owner = np.repeat(np.arange(n_flows), counts)
    first = np.zeros(total, dtype=bool)
    first[np.concatenate(([0], np.cumsum(counts)[:-1]))] = True
    pa = app_idx[owner]
    ff = np.array([p.forward_fraction for p in prof])[pa]
    fwd = (rng.random(total) < ff) | first
    fmean = np.array([p.fwd_len_mean for p in prof])[pa]
    fstd = np.array([p.fwd_len_std for p in prof])[pa]
    bmean = np.array([p.bwd_len_mean for p in prof])[pa]
    bstd = np.array([p.bwd_len_std for p in prof])[pa]
    z = rng.standard_normal(total)
    lens = np.where(fwd, fmean + fstd * z, bmean + bstd * z)
    lens = np.clip(np.rint(lens), 1, MAX_PAYLOAD).astype(np.int64)
    rate = np.array([p.iat_rate for p in prof])[pa]
    gaps = np.maximum(1, np.rint(rng.exponential(1.0, total) / rate * 1e6)).astype(np.int64)
    # SYN -> first data, last data -> client FIN, client FIN -> server FIN
    ctrl_gaps = np.maximum(1, np.rint(rng.exponential(1.0, (n_flows, 3)) / rate[np.cumsum(counts) - 1, None] * 1e6)).astype(np.int64)
    starts = int(round(start_time * 1e6)) + np.cumsum(
        np.maximum(1, np.rint(rng.exponential(1.0 / FLOW_RATE, n_flows) * 1e6))).astype(np.int64)

    c_net = clients[rng.integers(0, len(clients), n_flows)]
    c_ip = c_net + rng.integers(2, 255, n_flows)
    c_port = rng.integers(1024, 65536, n_flows)
    s_draw = rng.random(n_flows)
    p_draw = rng.random(n_flows)
    h_draw = rng.random(n_flows)

    flows: list[Flow] = []
    pos = 0
    for i in range(n_flows):
        p = prof[app_idx[i]]
        h_lo, h_hi = p.host_range
        s_ip = p.subnet_pool[int(s_draw[i] * len(p.subnet_pool))] + h_lo + int(h_draw[i] * (h_hi - h_lo + 1))
        s_port = p.port_pool[int(p_draw[i] * len(p.port_pool))]
        cip, cport = int(c_ip[i]), int(c_port[i])
        k = int(counts[i])
        g = ctrl_gaps[i]
        t = int(starts[i])
        F, B = Direction.Forward, Direction.Backward
        pk = [Packet(t / 1e6, cip, s_ip, cport, s_port, 0, SYN, F, TCP)]
        t += int(g[0])
        for j in range(pos, pos + k):
            if j > pos:
                t += int(gaps[j])
            if fwd[j]:
                pk.append(Packet(t / 1e6, cip, s_ip, cport, s_port, int(lens[j]), ACK | PSH, F, TCP))
            else:
                pk.append(Packet(t / 1e6, s_ip, cip, s_port, cport, int(lens[j]), ACK | PSH, B, TCP))
        t += int(g[1])
        pk.append(Packet(t / 1e6, cip, s_ip, cport, s_port, 0, FIN | ACK, F, TCP))
        t += int(g[2])
        pk.append(Packet(t / 1e6, s_ip, cip, s_port, cport, 0, FIN | ACK, B, TCP))
        pos += k
        flows.append(Flow(canonical_flow_key(pk[0]), tuple(pk), apps[app_idx[i]]))
    return flows


def profiles_to_dict(profiles: Mapping[AppType, SyntheticProfile], client_subnets=()) -> dict:
    apps = {}
    for app, p in profiles.items():
        apps[app.name] = {
            "packet_count": {"mu": p.packet_count_mu, "sigma": p.packet_count_sigma},
            "fwd_len": {"mean": p.fwd_len_mean, "std": p.fwd_len_std},
            "bwd_len": {"mean": p.bwd_len_mean, "std": p.bwd_len_std},
            "iat_rate": p.iat_rate,
            "forward_fraction": p.forward_fraction,
            "ports": list(p.port_pool),
            "subnets": [_int_to_subnet(s) for s in p.subnet_pool],
            "hosts": list(p.host_range),
        }
    out = {"apps": apps}
    if client_subnets:
        out["clients"] = [_int_to_subnet(s) for s in client_subnets]
    return out


PROFILE_SCHEMA = {
    "type": "object",
    "required": ["apps"],
    "additionalProperties": False,
    "properties": {
        "clients": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "apps": {
            "type": "object",
            "minProperties": 1,
            "propertyNames": {"enum": [a.name for a in AppType]},
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["packet_count", "fwd_len", "bwd_len", "iat_rate",
                             "forward_fraction", "ports", "subnets"],
                "properties": {
                    "packet_count": {"type": "object", "required": ["mu", "sigma"],
                                     "properties": {"mu": {"type": "number"},
                                                    "sigma": {"type": "number", "minimum": 0}}},
                    "fwd_len": {"$ref": "#/$defs/normal"},
                    "bwd_len": {"$ref": "#/$defs/normal"},
                    "iat_rate": {"type": "number", "exclusiveMinimum": 0},
                    "forward_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "ports": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 65535}},
                    "subnets": {"type": "array", "items": {"type": "string", "pattern": r"^\d+\.\d+\.\d+\.\d+(/24)?$"}},
                    "hosts": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 254},
                              "minItems": 2, "maxItems": 2},
                },
            },
        },
    },
    "$defs": {
        "normal": {"type": "object", "required": ["mean", "std"],
                   "properties": {"mean": {"type": "number", "exclusiveMinimum": 0},
                                  "std": {"type": "number", "minimum": 0}}},
    },
}


def profiles_from_dict(doc: dict) -> tuple[dict, tuple[int, ...]]:
    from .config import validate

    validate(doc, PROFILE_SCHEMA, "profiles")
    profiles = {}
    for name, d in doc["apps"].items():
        profiles[AppType[name]] = SyntheticProfile(
            d["packet_count"]["mu"], d["packet_count"]["sigma"],
            d["fwd_len"]["mean"], d["fwd_len"]["std"],
            d["bwd_len"]["mean"], d["bwd_len"]["std"],
            d["iat_rate"], d["forward_fraction"], tuple(d["ports"]), tuple(d["subnets"]),
            tuple(d.get("hosts", (1, SERVER_HOSTS))))
    clients = tuple(_subnet_to_int(s) for s in doc.get("clients", ()))
    return profiles, clients


def load_profiles(path) -> tuple[dict, tuple[int, ...]]:
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return profiles_from_dict(doc)


def dump_profiles(path, profiles, client_subnets=()) -> None:
    doc = profiles_to_dict(profiles, client_subnets)
    with open(path, "w", encoding="utf-8") as fh:
        if str(path).endswith(".json"):
            json.dump(doc, fh, indent=1)
        else:
            yaml.safe_dump(doc, fh, sort_keys=False)


def uniform_mix(apps=None) -> dict[AppType, float]:
    return {a: 1.0 for a in (apps if apps is not None else AppType)}


def synth_flows(preset_name: str, n_flows: int, seed: int, apps=None, start_time: float = 0.0) -> list[Flow]:
    """Shorthand: ``n_flows`` flows from a named preset, uniform over ``apps``."""
    pr = preset(preset_name)
    return generate_synthetic(pr.profiles, uniform_mix(apps), n_flows, seed, pr.client_subnets, start_time)

