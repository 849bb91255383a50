import struct

import pytest

from fphtc.pcapio import (LINKTYPE_ETHERNET, LINKTYPE_RAW, DpiOracle, PcapFormatError, PcapStats,
                          dpi_label, load_manifest, read_capture, read_corpus, read_pcap,
                          write_corpus, write_manifest, write_pcap)
from fphtc.synthetic import synth_flows
from fphtc.traffic import ACK, SYN, AppType, Packet

from conftest import conversation, tcp


def four(p):
    return p.src_ip, p.dst_ip, p.src_port, p.dst_port


@pytest.mark.parametrize("linktype", [LINKTYPE_ETHERNET, LINKTYPE_RAW])
def test_round_trip_synthetic(tmp_path, linktype):
    flows = synth_flows("separable", 60, seed=2)
    packets = sorted((p for f in flows for p in f.packets), key=lambda p: p.timestamp)
    path = tmp_path / "x.pcap"
    assert write_pcap(path, packets, linktype) == len(packets)
    back = read_pcap(path)
    assert len(back) == len(packets)
    for a, b in zip(packets, back):
        assert four(a) == four(b)
        assert round(a.timestamp * 1e6) == round(b.timestamp * 1e6)
        assert (a.payload_len, a.tcp_flags) == (b.payload_len, b.tcp_flags)


def test_with_payload_bytes(tmp_path):
    p = tcp(1.5, "10.0.0.1", 5000, "10.0.0.2", 80, 300)
    write_pcap(tmp_path / "a.pcap", [p], with_payload=True)
    (q,) = read_pcap(tmp_path / "a.pcap")
    assert q.payload_len == 300 and q.timestamp == 1.5


def _swap_to_big_endian(raw: bytes) -> bytes:
    out = bytearray()
    magic, vmaj, vmin, tz, sig, snap, lt = struct.unpack_from("<IHHiIII", raw, 0)
    out += struct.pack(">IHHiIII", magic, vmaj, vmin, tz, sig, snap, lt)
    off = 24
    while off < len(raw):
        sec, usec, incl, orig = struct.unpack_from("<IIII", raw, off)
        out += struct.pack(">IIII", sec, usec, incl, orig)
        out += raw[off + 16:off + 16 + incl]
        off += 16 + incl
    return bytes(out)


def test_big_endian_and_nanosecond(tmp_path):
    pk = [tcp(1.25, "10.0.0.1", 5000, "10.0.0.2", 80, 10), tcp(2.5, "10.0.0.2", 80, "10.0.0.1", 5000, 20)]
    write_pcap(tmp_path / "le.pcap", pk)
    raw = (tmp_path / "le.pcap").read_bytes()
    (tmp_path / "be.pcap").write_bytes(_swap_to_big_endian(raw))
    assert [four(p) for p in read_pcap(tmp_path / "be.pcap")] == [four(p) for p in pk]
    # nanosecond magic: rewrite the sub-second field in ns
    ns = bytearray(raw)
    struct.pack_into("<I", ns, 0, 0xA1B23C4D)
    off = 24
    while off < len(ns):
        sec, usec, incl, _ = struct.unpack_from("<IIII", ns, off)
        struct.pack_into("<I", ns, off + 4, usec * 1000)
        off += 16 + incl
    (tmp_path / "ns.pcap").write_bytes(bytes(ns))
    assert [p.timestamp for p in read_pcap(tmp_path / "ns.pcap")] == [1.25, 2.5]


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad.pcap").write_bytes(b"\x00" * 24)
    with pytest.raises(PcapFormatError):
        read_pcap(tmp_path / "bad.pcap")
    pk = [tcp(i, "10.0.0.1", 5000, "10.0.0.2", 80, 10) for i in range(3)]
    write_pcap(tmp_path / "t.pcap", pk)
    raw = (tmp_path / "t.pcap").read_bytes()
    (tmp_path / "t.pcap").write_bytes(raw[:-7])
    s = PcapStats()
    assert len(read_pcap(tmp_path / "t.pcap", s)) == 2
    assert s.truncated == 1


def test_vlan_tagged_frame(tmp_path):
    write_pcap(tmp_path / "v.pcap", [tcp(0, "10.0.0.1", 5000, "10.0.0.2", 80, 10)])
    raw = bytearray((tmp_path / "v.pcap").read_bytes())
    hdr = 24
    sec, usec, incl, orig = struct.unpack_from("<IIII", raw, hdr)
    frame = raw[hdr + 16:]
    tagged = frame[:12] + b"\x81\x00\x00\x05" + frame[12:]
    raw = raw[:hdr] + struct.pack("<IIII", sec, usec, incl + 4, orig + 4) + tagged
    (tmp_path / "v.pcap").write_bytes(bytes(raw))
    (p,) = read_pcap(tmp_path / "v.pcap")
    assert p.dst_port == 80 and p.payload_len == 10


def _manifest(tmp_path, name, app):
    (tmp_path / "m.tsv").write_text(f"{name}\t{app}\n")
    return load_manifest(tmp_path / "m.tsv")


def test_read_capture_handshake(tmp_path):
    pk = [tcp(0, "10.0.0.1", 5000, "10.0.0.2", 5060, 0, SYN),
          tcp(0.1, "10.0.0.2", 5060, "10.0.0.1", 5000, 0, SYN | ACK),
          tcp(0.2, "10.0.0.1", 5000, "10.0.0.2", 5060, 120)]
    write_pcap(tmp_path / "voip.pcap", pk)
    flows = read_capture(tmp_path / "voip.pcap", _manifest(tmp_path, "voip.pcap", "VOIP"))
    assert len(flows) == 1 and flows[0].true_app is AppType.VOIP
    assert dpi_label(flows[0]) is AppType.VOIP


def test_udp_only_and_empty(tmp_path):
    udp = [Packet.make(i, "10.0.0.1", 53, "10.0.0.2", 53, 40, protocol=17) for i in range(4)]
    write_pcap(tmp_path / "u.pcap", udp)
    s = PcapStats()
    assert read_pcap(tmp_path / "u.pcap", s) == [] and s.non_tcp == 4
    assert read_capture(tmp_path / "u.pcap", _manifest(tmp_path, "u.pcap", "MAIL")) == []
    write_pcap(tmp_path / "e.pcap", [])
    assert read_pcap(tmp_path / "e.pcap") == []


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("missing.pcap\tVOIP\n")
    with pytest.raises(FileNotFoundError, match="m.tsv:1"):
        load_manifest(tmp_path / "m.tsv")
    write_pcap(tmp_path / "a.pcap", [])
    (tmp_path / "m.tsv").write_text("# comment\na.pcap\tGAMES\n")
    with pytest.raises(ValueError, match="m.tsv:2"):
        load_manifest(tmp_path / "m.tsv")
    write_manifest(tmp_path / "w.tsv", {tmp_path / "a.pcap": AppType.MAIL})
    assert (tmp_path / "w.tsv").read_text() == "a.pcap\tMAIL\n"


def test_corpus_round_trip(tmp_path):
    flows = synth_flows("separable", 200, seed=4)
    manifest = write_corpus(flows, tmp_path / "c")
    back = read_corpus(manifest)
    assert len(back) == len(flows)
    key = lambda f: (f.key, f.packets[0].timestamp)
    for a, b in zip(sorted(flows, key=key), sorted(back, key=key)):
        assert a.true_app is b.true_app
        assert [four(p) for p in a.packets] == [four(p) for p in b.packets]
        assert [p.direction for p in a.packets] == [p.direction for p in b.packets]


def test_dpi_oracle_accounting():
    flows = [conversation(cport=2000 + i, app=AppType.MAIL) for i in range(5)]
    o = DpiOracle(2.5)
    assert [o.label(f) for f in flows] == [AppType.MAIL] * 5
    assert o.flows_labeled == 5 and o.cost == 12.5
    with pytest.raises(ValueError):
        dpi_label(flows[0].with_app(None))
