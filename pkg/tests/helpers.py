"""Packet and flow builders shared by the test modules."""
from antkit.ingest import tcp_header, udp_header
from antkit.traffic import TCP, BidirectionalFlow, FiveTuple, Packet


def tup(src="10.0.0.1", dst="10.0.0.2", sport=5000, dport=443, proto=TCP):
    return FiveTuple.from_strings(src, dst, sport, dport, proto)


def pkt(ts, payload=b"\x01", t=None, direction=1, proto=None):
    t = t or tup()
    if proto is not None and proto != t.proto:
        t = FiveTuple(t.src_ip, t.dst_ip, t.src_port, t.dst_port, proto)
    hdr = (tcp_header(t.src_port, t.dst_port) if t.proto == TCP
           else udp_header(t.src_port, t.dst_port, len(payload)))
    return Packet(ts, t, hdr, bytes(payload), direction)


def flow_from(directions, payloads=None, iats=None, proto=TCP, label=0):
    """Flow with the given direction signs; packets 1 s apart unless ``iats`` given."""
    fwd = tup(proto=proto)
    ts = 0
    pkts = []
    for i, d in enumerate(directions):
        if i:
            ts += iats[i - 1] if iats is not None else 1_000_000
        payload = payloads[i] if payloads is not None else bytes([i + 1] * 3)
        pkts.append(pkt(ts, payload, fwd if d == 1 else fwd.reverse(), d))
    return BidirectionalFlow(fwd, 180_000_000, pkts, label)
