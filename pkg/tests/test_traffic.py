import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from antkit.errors import DataError
from antkit.traffic import (TCP, UDP, BidirectionalFlow, FiveTuple, Packet, assemble_flows,
                            burst_directions, canonicalize, split_bursts)

from helpers import flow_from, pkt, tup

tuples = st.builds(FiveTuple, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
                   st.integers(0, 65535), st.integers(0, 65535), st.sampled_from([TCP, UDP]))


def test_canonical_tuple_unchanged():
    t = tup("10.0.0.1", "10.0.0.2", 5000, 443)
    assert canonicalize(t) == t


def test_reversed_tuple_maps_to_same_key():
    t = tup("10.0.0.2", "10.0.0.1", 443, 5000)
    assert canonicalize(t) == tup("10.0.0.1", "10.0.0.2", 5000, 443)


@settings(max_examples=1000)
@given(tuples)
def test_canonicalize_idempotent_and_direction_free(t):
    c = canonicalize(t)
    assert canonicalize(c) == c
    assert canonicalize(t.reverse()) == c


def test_five_tuple_rejects_other_protocols():
    with pytest.raises(DataError):
        FiveTuple(1, 2, 3, 4, 1)


def test_five_tuple_bytes_round_trip():
    t = tup("192.0.2.7", "10.1.2.3", 65535, 0, UDP)
    assert FiveTuple.from_bytes(t.to_bytes()) == t


def test_packet_header_length_rules():
    with pytest.raises(DataError):
        Packet(0, tup(proto=UDP), b"\x00" * 20, b"x")
    with pytest.raises(DataError):
        Packet(0, tup(proto=TCP), b"\x00" * 8, b"x")


def test_assemble_empty():
    assert assemble_flows([]) == []


def test_assemble_three_packets_one_flow():
    pkts = [pkt(0), pkt(1_000_000), pkt(2_000_000)]
    flows = assemble_flows(pkts, 180_000_000)
    assert len(flows) == 1 and len(flows[0]) == 3


def test_assemble_gap_over_timeout_splits():
    flows = assemble_flows([pkt(0), pkt(200_000_000)], 180_000_000)
    assert [len(f) for f in flows] == [1, 1]


def test_assemble_gap_equal_to_timeout_stays():
    flows = assemble_flows([pkt(0), pkt(180_000_000)], 180_000_000)
    assert len(flows) == 1


def test_assemble_bidirectional_directions():
    t = tup()
    flows = assemble_flows([pkt(0, t=t), pkt(1_000_000, t=t.reverse())])
    assert len(flows) == 1
    assert flows[0].directions == [1, -1]


def test_orientation_from_first_packet():
    t = tup()
    flows = assemble_flows([pkt(0, t=t.reverse()), pkt(5, t=t)])
    assert flows[0].tuple == t.reverse()
    assert flows[0].directions == [1, -1]


def test_assemble_rejects_unsorted():
    with pytest.raises(DataError):
        assemble_flows([pkt(5), pkt(1)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.booleans(), st.integers(0, 400)),
                min_size=1, max_size=200))
def test_assemble_partitions_packets(spec):
    keys = [tup(sport=5000 + k) for k in range(4)]
    ts, pkts = 0, []
    for k, rev, gap in spec:
        ts += gap * 1_000_000
        pkts.append(pkt(ts, bytes([len(pkts) % 256]), keys[k].reverse() if rev else keys[k]))
    flows = assemble_flows(pkts, 180_000_000)
    seen = sorted((p.timestamp_us, p.tuple, p.payload) for f in flows for p in f.packets)
    assert seen == sorted((p.timestamp_us, p.tuple, p.payload) for p in pkts)
    for f in flows:
        assert all(0 <= g <= 180_000_000 for g in f.iats_us())
        for p in f.packets:
            assert p.direction == (1 if p.tuple == f.tuple else -1)


def test_split_bursts_example():
    bursts = split_bursts(flow_from([1, 1, -1, 1]))
    assert [len(b.packets) for b in bursts] == [2, 1, 1]
    assert [b.direction for b in bursts] == [1, -1, 1]
    assert [b.index for b in bursts] == [0, 1, 2]


def test_single_direction_one_burst():
    assert len(split_bursts(flow_from([-1] * 6))) == 1


def test_alternating_singletons():
    bursts = split_bursts(flow_from([1, -1] * 4))
    assert [len(b.packets) for b in bursts] == [1] * 8


def test_split_bursts_empty_flow():
    with pytest.raises(DataError):
        split_bursts(BidirectionalFlow(tup()))


@given(st.lists(st.sampled_from([1, -1]), min_size=1, max_size=60))
def test_bursts_round_trip_and_alternate(dirs):
    f = flow_from(dirs)
    bursts = split_bursts(f)
    assert [p for b in bursts for p in b.packets] == f.packets
    assert all(a.direction == -b.direction for a, b in zip(bursts, bursts[1:]))
    assert [(b.direction, b.start, b.stop) for b in bursts] == burst_directions(dirs)
