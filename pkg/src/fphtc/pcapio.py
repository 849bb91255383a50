"""Classic pcap reading and writing, capture manifests and the DPI oracle."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .traffic import (DEFAULT_IDLE_TIMEOUT, TCP, AppType, AssemblyStats, Flow,
                      Packet, assemble_flows)

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

_MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = 0xA1B23C4D
_ETH_IPV4 = 0x0800
_ETH_VLAN = 0x8100
_IP_HDR = 20
_TCP_HDR = 20


class PcapFormatError(ValueError):
    pass


@dataclass
class PcapStats:
    records: int = 0
    truncated: int = 0
    non_ipv4: int = 0
    non_tcp: int = 0
    malformed: int = 0


def _ip_tcp_header(p: Packet) -> bytes:
    total = _IP_HDR + _TCP_HDR + p.payload_len
    if total > 0xFFFF:
        raise ValueError(f"payload too large for IPv4: {p.payload_len}")
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, total, 0, 0x4000, 64, p.protocol, 0,
                     p.src_ip, p.dst_ip)
    tcp = struct.pack("!HHIIBBHHH", p.src_port, p.dst_port, 0, 0, (_TCP_HDR // 4) << 4,
                      p.tcp_flags & 0xFF, 65535, 0, 0)
    return ip + tcp


def write_pcap(path, packets: Iterable[Packet], linktype: int = LINKTYPE_ETHERNET,
               snaplen: int = 65535, with_payload: bool = False) -> int:
    """Write packets as a little-endian microsecond pcap.

    Without ``with_payload`` only the headers are captured; the original
    length and the IP total-length field still carry the payload size.
    Returns the number of records written.
    """
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise ValueError(f"unsupported link type {linktype}")
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", _ETH_IPV4)
    n = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, snaplen, linktype))
        for p in packets:
            frame = _ip_tcp_header(p)
            if linktype == LINKTYPE_ETHERNET:
                frame = eth + frame
            orig_len = len(frame) + p.payload_len
            if with_payload:
                frame += bytes(p.payload_len)
            frame = frame[:snaplen]
            usec = int(round(p.timestamp * 1_000_000))
            sec, usec = divmod(usec, 1_000_000)
            fh.write(struct.pack("<IIII", sec, usec, len(frame), orig_len))
            fh.write(frame)
            n += 1
    return n


def _decode_ipv4(data: bytes, ts: float, stats: PcapStats) -> Packet | None:
    if len(data) < _IP_HDR or data[0] >> 4 != 4:
        stats.non_ipv4 += 1
        return None
    ihl = (data[0] & 0x0F) * 4
    total_len = struct.unpack_from("!H", data, 2)[0]
    proto = data[9]
    src, dst = struct.unpack_from("!II", data, 12)
    if proto != TCP:
        stats.non_tcp += 1
        return None
    if ihl < _IP_HDR or len(data) < ihl + 13:
        stats.malformed += 1
        return None
    sport, dport = struct.unpack_from("!HH", data, ihl)
    doff = (data[ihl + 12] >> 4) * 4
    flags = data[ihl + 13] if len(data) > ihl + 13 else 0
    payload = total_len - ihl - doff
    if doff < _TCP_HDR or payload < 0:
        stats.malformed += 1
        return None
    return Packet(ts, src, dst, sport, dport, payload, flags, None, TCP)


def read_pcap(path, stats: PcapStats | None = None) -> list[Packet]:
    """Decode the IPv4/TCP packets of a classic pcap file."""
    if stats is None:
        stats = PcapStats()
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise PcapFormatError(f"{path}: too short for a pcap header")
    magic_le = struct.unpack_from("<I", raw, 0)[0]
    if magic_le in (_MAGIC_US, _MAGIC_NS):
        endian = "<"
    elif struct.unpack_from(">I", raw, 0)[0] in (_MAGIC_US, _MAGIC_NS):
        endian = ">"
    else:
        raise PcapFormatError(f"{path}: bad pcap magic 0x{magic_le:08x}")
    magic = struct.unpack_from(endian + "I", raw, 0)[0]
    frac = 1_000_000_000 if magic == _MAGIC_NS else 1_000_000
    linktype = struct.unpack_from(endian + "I", raw, 20)[0] & 0x0FFFFFFF
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise PcapFormatError(f"{path}: unsupported link type {linktype}")

    packets = []
    off = 24
    rec = endian + "IIII"
    while off < len(raw):
        if off + 16 > len(raw):
            stats.truncated += 1
            break
        sec, sub, incl, _orig = struct.unpack_from(rec, raw, off)
        off += 16
        if off + incl > len(raw):
            stats.truncated += 1
            break
        data = raw[off:off + incl]
        off += incl
        stats.records += 1
        ts = (sec * frac + sub) / frac
        if linktype == LINKTYPE_ETHERNET:
            if len(data) < 14:
                stats.malformed += 1
                continue
            etype = struct.unpack_from("!H", data, 12)[0]
            hdr = 14
            if etype == _ETH_VLAN and len(data) >= 18:
                etype = struct.unpack_from("!H", data, 16)[0]
                hdr = 18
            if etype != _ETH_IPV4:
                stats.non_ipv4 += 1
                continue
            data = data[hdr:]
        pkt = _decode_ipv4(data, ts, stats)
        if pkt is not None:
            packets.append(pkt)
    if stats.truncated:
        log.warning("%s: truncated record at end of file", path)
    return packets


def load_manifest(path) -> dict[Path, AppType]:
    """Read ``path<TAB>APPTYPE`` rows; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    entries: dict[Path, AppType] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>APPTYPE'")
        file, app = parts[0].strip(), parts[1].strip()
        try:
            app_type = AppType[app]
        except KeyError:
            raise ValueError(f"{path}:{lineno}: unknown application type {app!r}") from None
        fp = Path(file)
        if not fp.is_absolute():
            fp = base / fp
        if not fp.exists():
            raise FileNotFoundError(f"{path}:{lineno}: capture {fp} does not exist")
        entries[fp.resolve()] = app_type
    return entries


def write_manifest(path, entries: dict) -> None:
    path = Path(path)
    lines = []
    for fp, app in entries.items():
        fp = Path(fp)
        try:
            fp = fp.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        lines.append(f"{fp.as_posix()}\t{app.name}\n")
    path.write_text("".join(lines), encoding="utf-8")


def read_capture(path, manifest: dict, stats: AssemblyStats | None = None,
                 pcap_stats: PcapStats | None = None,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[Flow]:
    key = Path(path).resolve()
    if key not in manifest:
        raise KeyError(f"{path} is not listed in the manifest")
    if pcap_stats is None:
        pcap_stats = PcapStats()
    packets = read_pcap(path, pcap_stats)
    return assemble_flows(packets, idle_timeout, stats, app=manifest[key])


def read_corpus(manifest_path) -> list[Flow]:
    """All flows of every capture in a manifest, ordered by first packet time."""
    manifest = load_manifest(manifest_path)
    flows = []
    for fp in manifest:
        flows.extend(read_capture(fp, manifest))
    flows.sort(key=lambda f: (f.packets[0].timestamp, f.key))
    return flows


def write_corpus(flows: Sequence[Flow], out_dir, linktype: int = LINKTYPE_ETHERNET) -> Path:
    """One pcap per application type plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_app: dict[AppType, list[Packet]] = {}
    for f in flows:
        if f.true_app is None:
            raise ValueError("every flow written to a corpus needs a true application")
        by_app.setdefault(f.true_app, []).extend(f.packets)
    entries = {}
    for app in AppType:
        if app not in by_app:
            continue
        pkts = sorted(by_app[app], key=lambda p: p.timestamp)
        fp = out / f"{app.name.lower()}.pcap"
        write_pcap(fp, pkts, linktype)
        entries[fp] = app
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


class DpiOracle:
    """Ground-truth stand-in for deep packet inspection, with cost accounting."""

    def __init__(self, cost_per_flow: float = 1.0):
        self.cost_per_flow = cost_per_flow
        self.flows_labeled = 0

    @property
    def cost(self) -> float:
        return self.flows_labeled * self.cost_per_flow

    def label(self, flow: Flow) -> AppType:
        app = dpi_label(flow)
        self.flows_labeled += 1
        return app


def dpi_label(flow: Flow) -> AppType:
    if flow.true_app is None:
        raise ValueError("flow has no ground truth; it cannot be DPI-labeled")
    return flow.true_app
