"""Fixed-length encodings of packets and flows.

Six encodings over three input spaces:

* packet classification (``PC_HP``, ``PC_P``): bytes of one packet / 255,
* flow content (``FCC_HP``, ``FCC_P``): the first ``n`` packets, each laid out
  as a packet encoding and multiplied by its direction sign,
* flow time series (``FTSC_PS``, ``FTSC_IAT``): standardized sizes or
  log-normalized inter-arrival times of the first ``m`` packets, signed.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .traffic import MAX_PKT_SIZE, BidirectionalFlow, Packet


class Kind(enum.IntEnum):
    PC_HP = 0
    PC_P = 1
    FCC_HP = 2
    FCC_P = 3
    FTSC_PS = 4
    FTSC_IAT = 5

    @property
    def category(self) -> str:
        return self.name.split("_")[0]

    @property
    def with_header(self) -> bool:
        return self in (Kind.PC_HP, Kind.FCC_HP)


@dataclass(frozen=True)
class Encoding:
    kind: Kind
    n: int = 10
    m: int = 100
    max_pkt_size: int = MAX_PKT_SIZE

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.n < 1 or self.m < 2 or self.max_pkt_size < 60:
            raise DataError(f"invalid encoding parameters n={self.n} m={self.m} "
                            f"max_pkt_size={self.max_pkt_size}")

    @property
    def length(self) -> int:
        k = self.kind
        if k.category == "PC":
            return self.max_pkt_size
        if k.category == "FCC":
            return self.n * self.max_pkt_size
        return self.m if k == Kind.FTSC_PS else self.m - 1

    def to_dict(self) -> dict:
        return {"kind": self.kind.name, "n": self.n, "m": self.m,
                "max_pkt_size": self.max_pkt_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoding":
        return cls(Kind[d["kind"]], d["n"], d["m"], d["max_pkt_size"])


@dataclass
class EncodedSample:
    values: np.ndarray
    label: int
    kind: Kind
    provenance: Optional[str] = None


@dataclass(frozen=True)
class NormStats:
    ps_mean: float
    ps_std: float
    iat_max: float

    def __post_init__(self):
        if not self.ps_std > 0:
            raise DataError("packet-size standard deviation must be positive")
        if not self.iat_max >= 1:
            raise DataError("iat_max must be at least 1 microsecond")

    def to_dict(self) -> dict:
        return {"ps_mean": self.ps_mean, "ps_std": self.ps_std, "iat_max": self.iat_max}


# ----------------------------------------------------------- byte encodings

def packet_bytes(pkt: Packet, with_header: bool) -> bytes:
    return pkt.tl_header + pkt.payload if with_header else pkt.payload


def bytes_to_unit(raw: bytes, length: int) -> np.ndarray:
    """Bytes / 255, right-padded with zeros or truncated to ``length``."""
    out = np.zeros(length, dtype=np.float32)
    arr = np.frombuffer(raw[:length], dtype=np.uint8)
    out[:len(arr)] = arr / np.float32(255.0)
    return out


def encode_packet(pkt: Packet, kind: Kind = Kind.PC_HP, max_pkt_size: int = MAX_PKT_SIZE,
                  label: int = -1) -> EncodedSample:
    kind = Kind(kind)
    if kind.category != "PC":
        raise DataError(f"{kind.name} is not a packet encoding")
    if not pkt.payload:
        raise DataError("packet has an empty payload")
    return EncodedSample(bytes_to_unit(packet_bytes(pkt, kind.with_header), max_pkt_size),
                         label, kind)


def payload_packets(flow: BidirectionalFlow) -> list:
    return [p for p in flow.packets if p.payload]


def encode_flow_content(flow: BidirectionalFlow, kind: Kind = Kind.FCC_HP, n: int = 10,
                        max_pkt_size: int = MAX_PKT_SIZE) -> EncodedSample:
    kind = Kind(kind)
    if kind.category != "FCC":
        raise DataError(f"{kind.name} is not a flow-content encoding")
    pkts = payload_packets(flow)[:n]
    if not pkts:
        raise DataError("flow has no payload-bearing packets")
    out = np.zeros(n * max_pkt_size, dtype=np.float32)
    for j, pkt in enumerate(pkts):
        slot = bytes_to_unit(packet_bytes(pkt, kind.with_header), max_pkt_size)
        out[j * max_pkt_size:(j + 1) * max_pkt_size] = slot * pkt.direction
    return EncodedSample(out, -1 if flow.label is None else flow.label, kind)


# ----------------------------------------------------- time-series encodings

def fit_norm_stats(flows: Iterable[BidirectionalFlow]) -> NormStats:
    """Packet-size mean/std (population) and the largest IAT, from training flows."""
    sizes, iats = [], []
    for flow in flows:
        sizes.extend(p.size for p in flow.packets)
        iats.extend(flow.iats_us())
    if len(sizes) < 2:
        raise DataError("need at least two packets to fit normalization statistics")
    sizes = np.asarray(sizes, dtype=np.float64)
    std = float(sizes.std())
    if std == 0:
        raise DataError("all training packet sizes are equal; zero variance")
    iat_max = float(max(iats)) if iats else 1.0
    return NormStats(float(sizes.mean()), std, max(iat_max, 1.0))


def normalize_ps(size, stats: NormStats):
    return (np.asarray(size, dtype=np.float64) - stats.ps_mean) / stats.ps_std


def normalize_iat(iat_us, stats: NormStats):
    # log base iat_max of (IAT + 1us); iat_max == 1 would make the base degenerate
    base = np.log(stats.iat_max) if stats.iat_max > 1 else np.log(2.0)
    return 2.0 * np.log(np.asarray(iat_us, dtype=np.float64) + 1.0) / base


def decode_ps(value, stats: NormStats):
    """Standardized size back to bytes (unrounded)."""
    out = np.asarray(value, dtype=np.float64) * stats.ps_std + stats.ps_mean
    return float(out) if out.ndim == 0 else out


def decode_iat(value, stats: NormStats):
    """Normalized IAT back to whole microseconds, floored at zero."""
    base = stats.iat_max if stats.iat_max > 1 else 2.0
    raw = np.power(base, np.asarray(value, dtype=np.float64) / 2.0) - 1.0
    out = np.maximum(np.rint(raw), 0.0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def signed_series(flow: BidirectionalFlow, kind: Kind, stats: NormStats) -> np.ndarray:
    """Full-length signed feature series of a flow (no window applied)."""
    dirs = np.asarray(flow.directions, dtype=np.float64)
    if kind == Kind.FTSC_PS:
        return normalize_ps([p.size for p in flow.packets], stats) * dirs
    if kind == Kind.FTSC_IAT:
        return normalize_iat(flow.iats_us(), stats) * dirs[1:]
    raise DataError(f"{kind.name} is not a time-series encoding")


def encode_flow_timeseries(flow: BidirectionalFlow, kind: Kind, m: int = 100,
                           stats: Optional[NormStats] = None) -> EncodedSample:
    kind = Kind(kind)
    if stats is None:
        raise DataError("time-series encodings need fitted NormStats")
    need = 2 if kind == Kind.FTSC_IAT else 1
    if len(flow.packets) < need:
        raise DataError(f"{kind.name} needs a flow of at least {need} packets")
    length = m if kind == Kind.FTSC_PS else m - 1
    series = signed_series(flow, kind, stats)[:length]
    out = np.zeros(length, dtype=np.float32)
    out[:len(series)] = series
    return EncodedSample(out, -1 if flow.label is None else flow.label, kind)


# ------------------------------------------------------------------ dispatch

def encode(item, encoding: Encoding, stats: Optional[NormStats] = None) -> np.ndarray:
    k = encoding.kind
    if k.category == "PC":
        return encode_packet(item, k, encoding.max_pkt_size).values
    if k.category == "FCC":
        return encode_flow_content(item, k, encoding.n, encoding.max_pkt_size).values
    return encode_flow_timeseries(item, k, encoding.m, stats).values


def encode_many(items: Sequence, encoding: Encoding,
                stats: Optional[NormStats] = None) -> np.ndarray:
    out = np.zeros((len(items), encoding.length), dtype=np.float32)
    for i, item in enumerate(items):
        out[i] = encode(item, encoding, stats)
    return out


def samples_for(encoding: Encoding, flows: Sequence[BidirectionalFlow], labels=None) -> tuple:
    """Classifier items for an encoding: packets for PC, eligible flows otherwise.

    Returns ``(items, labels)``.  Flows that the encoding cannot represent
    (no payload for FCC, a single packet for FTSC_IAT) are left out.
    """
    if labels is None:
        labels = [f.label for f in flows]
    items, ys = [], []
    cat = encoding.kind.category
    for flow, y in zip(flows, labels):
        if cat == "PC":
            for pkt in payload_packets(flow):
                items.append(pkt)
                ys.append(y)
        elif cat == "FCC":
            if payload_packets(flow):
                items.append(flow)
                ys.append(y)
        elif len(flow.packets) >= (2 if encoding.kind == Kind.FTSC_IAT else 1):
            items.append(flow)
            ys.append(y)
    return items, np.asarray(ys, dtype=np.int64)


# -------------------------------------------------------------- binary format

_SAMPLE_HDR = struct.Struct("<BIH")


def dump_samples(samples: Iterable[EncodedSample]) -> bytes:
    out = bytearray()
    for s in samples:
        vals = np.asarray(s.values, dtype="<f4")
        out += _SAMPLE_HDR.pack(int(s.kind), len(vals), s.label) + vals.tobytes()
    return bytes(out)


def load_samples(data: bytes) -> list:
    out = []
    off = 0
    while off < len(data):
        if off + _SAMPLE_HDR.size > len(data):
            raise DataError(f"truncated sample header at {off}")
        kind, length, label = _SAMPLE_HDR.unpack_from(data, off)
        off += _SAMPLE_HDR.size
        end = off + 4 * length
        if end > len(data):
            raise DataError(f"truncated sample body at {off}")
        vals = np.frombuffer(data[off:end], dtype="<f4").astype(np.float32)
        out.append(EncodedSample(vals, label, Kind(kind)))
        off = end
    return out
