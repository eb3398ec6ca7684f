"""Packets, bidirectional flows and bursts.

A flow is keyed by the direction-independent form of its 5-tuple and closed
as soon as two consecutive packets of the same key are further apart than the
flow timeout.  The first packet observed in a flow fixes its orientation: it
travels source -> destination and carries direction ``+1``.
"""
from __future__ import annotations

import dataclasses
import ipaddress
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import DataError

TCP = 6
UDP = 17

MAX_PKT_SIZE = 1500
DEFAULT_TIMEOUT_US = 180_000_000


@dataclass(frozen=True, order=True)
class FiveTuple:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int

    def __post_init__(self):
        if self.proto not in (TCP, UDP):
            raise DataError(f"unsupported transport protocol {self.proto}")
        if not (0 <= self.src_ip < 2**32 and 0 <= self.dst_ip < 2**32):
            raise DataError("IPv4 address out of range")
        if not (0 <= self.src_port < 2**16 and 0 <= self.dst_port < 2**16):
            raise DataError("port out of range")

    @classmethod
    def from_strings(cls, src: str, dst: str, sport: int, dport: int, proto: int = TCP):
        return cls(int(ipaddress.IPv4Address(src)), int(ipaddress.IPv4Address(dst)),
                   sport, dport, proto)

    def reverse(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.proto)

    def sort_key(self):
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto)

    def to_bytes(self) -> bytes:
        return (self.src_ip.to_bytes(4, "big") + self.dst_ip.to_bytes(4, "big")
                + self.src_port.to_bytes(2, "big") + self.dst_port.to_bytes(2, "big")
                + bytes([self.proto]))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FiveTuple":
        if len(raw) != 13:
            raise DataError(f"5-tuple needs 13 bytes, got {len(raw)}")
        return cls(int.from_bytes(raw[0:4], "big"), int.from_bytes(raw[4:8], "big"),
                   int.from_bytes(raw[8:10], "big"), int.from_bytes(raw[10:12], "big"),
                   raw[12])

    def __str__(self):
        name = "TCP" if self.proto == TCP else "UDP"
        return (f"{ipaddress.IPv4Address(self.src_ip)}:{self.src_port} -> "
                f"{ipaddress.IPv4Address(self.dst_ip)}:{self.dst_port} ({name})")


def canonicalize(tup: FiveTuple) -> FiveTuple:
    """Direction-independent key: the smaller of the tuple and its reversal."""
    rev = tup.reverse()
    return tup if tup.sort_key() <= rev.sort_key() else rev


@dataclass(frozen=True)
class Packet:
    timestamp_us: int
    tuple: FiveTuple
    tl_header: bytes
    payload: bytes
    direction: int = 1

    def __post_init__(self):
        hlen = len(self.tl_header)
        if self.tuple.proto == UDP and hlen != 8:
            raise DataError(f"UDP header must be 8 bytes, got {hlen}")
        if self.tuple.proto == TCP and hlen < 20:
            raise DataError(f"TCP header must be at least 20 bytes, got {hlen}")
        if self.direction not in (1, -1):
            raise DataError(f"direction must be +1 or -1, got {self.direction}")

    @property
    def size(self) -> int:
        """Transport header plus payload length in bytes."""
        return len(self.tl_header) + len(self.payload)

    def with_direction(self, direction: int) -> "Packet":
        if direction == self.direction:
            return self
        return dataclasses.replace(self, direction=direction)


@dataclass
class BidirectionalFlow:
    """Packets sharing a 5-tuple in either orientation, gap-bounded by ``timeout_us``.

    ``tuple`` is the orientation of the first packet; ``key`` is its
    direction-independent form.
    """
    tuple: FiveTuple
    timeout_us: int = DEFAULT_TIMEOUT_US
    packets: list = field(default_factory=list)
    label: Optional[int] = None

    @property
    def key(self) -> FiveTuple:
        return canonicalize(self.tuple)

    @property
    def directions(self) -> list:
        return [p.direction for p in self.packets]

    def iats_us(self) -> list:
        ts = [p.timestamp_us for p in self.packets]
        return [b - a for a, b in zip(ts, ts[1:])]

    def __len__(self):
        return len(self.packets)


@dataclass(frozen=True)
class Burst:
    direction: int
    packets: tuple
    index: int
    start: int  # position of the first packet inside the flow

    @property
    def stop(self) -> int:
        return self.start + len(self.packets)


def assemble_flows(packets: Iterable[Packet], timeout_us: int = DEFAULT_TIMEOUT_US,
                   label: Optional[int] = None) -> list:
    """Group time-ordered packets into bidirectional flows.

    Flows come back ordered by the timestamp of their first packet. Every
    packet is re-stamped with its direction relative to its flow.
    """
    open_flows: dict = {}
    flows: list = []
    last_ts = None
    for pkt in packets:
        if last_ts is not None and pkt.timestamp_us < last_ts:
            raise DataError(f"packets not sorted by timestamp at t={pkt.timestamp_us}")
        last_ts = pkt.timestamp_us
        key = canonicalize(pkt.tuple)
        flow = open_flows.get(key)
        if flow is None or pkt.timestamp_us - flow.packets[-1].timestamp_us > timeout_us:
            flow = BidirectionalFlow(pkt.tuple, timeout_us, [], label)
            open_flows[key] = flow
            flows.append(flow)
        direction = 1 if pkt.tuple == flow.tuple else -1
        flow.packets.append(pkt.with_direction(direction))
    return flows


def split_bursts(flow: BidirectionalFlow) -> list:
    """Maximal runs of same-direction packets, in flow order."""
    if not flow.packets:
        raise DataError("cannot split an empty flow into bursts")
    bursts = []
    start = 0
    pkts = flow.packets
    for i in range(1, len(pkts) + 1):
        if i == len(pkts) or pkts[i].direction != pkts[start].direction:
            bursts.append(Burst(pkts[start].direction, tuple(pkts[start:i]), len(bursts), start))
            start = i
    return bursts


def burst_directions(directions: Sequence[int]) -> list:
    """(direction, start, stop) triples for a bare direction sequence."""
    out = []
    start = 0
    for i in range(1, len(directions) + 1):
        if i == len(directions) or directions[i] != directions[start]:
            out.append((directions[start], start, i))
            start = i
    return out
