import numpy as np
import pytest

from fphtc.synthetic import synth_flows
from fphtc.traffic import ACK, FIN, SYN, AppType, Flow, Packet, assemble_flows


def tcp(ts, src, sport, dst, dport, payload=0, flags=ACK):
    return Packet.make(ts, src, sport, dst, dport, payload, flags)


def conversation(client="10.0.0.1", cport=5000, server="10.0.0.2", sport=80, t0=0.0,
                 payloads=(100, 1200, 100, 1200), app=AppType.WEB, gap=0.5):
    """A client/server exchange with alternating directions, closed by two FINs."""
    pk = [tcp(t0, client, cport, server, sport, 0, SYN)]
    for i, size in enumerate(payloads):
        t = t0 + gap * (i + 1)
        if i % 2 == 0:
            pk.append(tcp(t, client, cport, server, sport, size))
        else:
            pk.append(tcp(t, server, sport, client, cport, size))
    end = t0 + gap * (len(payloads) + 1)
    pk.append(tcp(end, client, cport, server, sport, 0, FIN | ACK))
    pk.append(tcp(end + 0.01, server, sport, client, cport, 0, FIN | ACK))
    (flow,) = assemble_flows(pk, app=app)
    return flow


@pytest.fixture(scope="session")
def separable_small():
    return synth_flows("separable", 1200, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
