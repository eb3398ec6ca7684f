"""Capture ingestion: classic pcap, background filtering, balancing, splits, bundles."""
from __future__ import annotations

import csv
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .traffic import (DEFAULT_TIMEOUT_US, TCP, UDP, BidirectionalFlow, FiveTuple, Packet,
                      assemble_flows)

logger = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

_MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = 0xA1B23C4D

BACKGROUND_PORTS = frozenset({53, 137, 138, 139})
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


class PcapError(DataError):
    """Unreadable capture. ``packets`` holds whatever was parsed before the failure."""

    def __init__(self, message, offset=None, packets=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset
        self.packets = packets or []


# --------------------------------------------------------------------------- pcap

def parse_pcap(data: bytes) -> tuple:
    """Parse a classic pcap capture.

    Returns ``(packets, skipped)`` where ``skipped`` counts the records that
    were not IPv4 TCP/UDP, keyed by reason.
    """
    if len(data) < 24:
        raise PcapError("file shorter than a pcap global header", 0)
    magic_le = struct.unpack("<I", data[:4])[0]
    magic_be = struct.unpack(">I", data[:4])[0]
    if magic_le in (_MAGIC_US, _MAGIC_NS):
        endian, magic = "<", magic_le
    elif magic_be in (_MAGIC_US, _MAGIC_NS):
        endian, magic = ">", magic_be
    else:
        raise PcapError(f"unsupported capture format (magic 0x{magic_le:08x})", 0)
    nanos = magic == _MAGIC_NS
    linktype = struct.unpack(endian + "I", data[20:24])[0] & 0x0FFFFFFF
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise PcapError(f"unsupported link type {linktype}", 20)

    packets: list = []
    skipped: Counter = Counter()
    offset = 24
    rec_hdr = struct.Struct(endian + "IIII")
    while offset < len(data):
        if offset + 16 > len(data):
            raise PcapError("truncated record header", offset, packets)
        ts_sec, ts_frac, caplen, _ = rec_hdr.unpack_from(data, offset)
        if offset + 16 + caplen > len(data):
            raise PcapError("truncated record body", offset, packets)
        frame = data[offset + 16: offset + 16 + caplen]
        ts_us = ts_sec * 1_000_000 + (ts_frac // 1000 if nanos else ts_frac)
        pkt = _decode_frame(frame, linktype, ts_us, skipped)
        if pkt is not None:
            packets.append(pkt)
        offset += 16 + caplen
    return packets, skipped


def _decode_frame(frame: bytes, linktype: int, ts_us: int, skipped: Counter):
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            skipped["short_frame"] += 1
            return None
        ethertype = struct.unpack(">H", frame[12:14])[0]
        ip = frame[14:]
        if ethertype == 0x8100 and len(frame) >= 18:  # 802.1Q
            ethertype = struct.unpack(">H", frame[16:18])[0]
            ip = frame[18:]
        if ethertype == 0x86DD:
            skipped["ipv6"] += 1
            return None
        if ethertype != 0x0800:
            skipped["non_ip"] += 1
            return None
    else:
        ip = frame
    if len(ip) < 20:
        skipped["short_ip"] += 1
        return None
    version = ip[0] >> 4
    if version == 6:
        skipped["ipv6"] += 1
        return None
    if version != 4:
        skipped["non_ip"] += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len = struct.unpack(">H", ip[2:4])[0]
    proto = ip[9]
    frag = struct.unpack(">H", ip[6:8])[0]
    if proto not in (TCP, UDP):
        skipped["non_tcp_udp"] += 1
        return None
    if frag & 0x1FFF:
        skipped["fragment"] += 1
        return None
    # Ethernet trailers pad short frames; total length is authoritative.
    ip = ip[:total_len] if total_len >= ihl else ip
    src_ip = int.from_bytes(ip[12:16], "big")
    dst_ip = int.from_bytes(ip[16:20], "big")
    seg = ip[ihl:]
    if proto == TCP:
        if len(seg) < 20:
            skipped["short_transport"] += 1
            return None
        hlen = (seg[12] >> 4) * 4
        if hlen < 20 or len(seg) < hlen:
            skipped["short_transport"] += 1
            return None
    else:
        hlen = 8
        if len(seg) < 8:
            skipped["short_transport"] += 1
            return None
    sport, dport = struct.unpack(">HH", seg[:4])
    tup = FiveTuple(src_ip, dst_ip, sport, dport, proto)
    return Packet(ts_us, tup, bytes(seg[:hlen]), bytes(seg[hlen:]))


def write_pcap(packets: Iterable[Packet], linktype: int = LINKTYPE_ETHERNET) -> bytes:
    """Serialize packets as a microsecond classic pcap (little-endian)."""
    out = bytearray(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, 65535, linktype))
    for pkt in packets:
        seg = pkt.tl_header + pkt.payload
        ip = bytearray(struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(seg), 0, 0x4000, 64,
                                   pkt.tuple.proto, 0, pkt.tuple.src_ip.to_bytes(4, "big"),
                                   pkt.tuple.dst_ip.to_bytes(4, "big")))
        struct.pack_into(">H", ip, 10, _ip_checksum(bytes(ip)))
        frame = bytes(ip) + seg
        if linktype == LINKTYPE_ETHERNET:
            frame = b"\x00\x11\x22\x33\x44\x55\x66\x77\x88\x99\xaa\xbb\x08\x00" + frame
        sec, usec = divmod(pkt.timestamp_us, 1_000_000)
        out += struct.pack("<IIII", sec, usec, len(frame), len(frame)) + frame
    return bytes(out)


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f">{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def tcp_header(sport: int, dport: int, seq: int = 0, ack: int = 0, flags: int = 0x18,
               window: int = 65535) -> bytes:
    return struct.pack(">HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                       5 << 4, flags, window, 0, 0)


def udp_header(sport: int, dport: int, payload_len: int) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + payload_len, 0)


# ----------------------------------------------------------------- cleaning

def filter_background(packets: Iterable[Packet], ports=BACKGROUND_PORTS) -> list:
    """Drop DNS/NETBIOS traffic and packets without payload."""
    return [p for p in packets
            if p.payload and p.tuple.src_port not in ports and p.tuple.dst_port not in ports]


# ----------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    entries: list
    class_labels: list

    def __post_init__(self):
        if len(set(self.class_labels)) != len(self.class_labels):
            raise DataError("class labels must be unique")
        if len(self.class_labels) < 2:
            raise DataError("need at least two classes")
        for path, label in self.entries:
            if label not in self.class_labels:
                raise DataError(f"label {label!r} of {path} not in label set")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if rows and set(rows[0]) != {"path", "label"}:
            raise DataError(f"manifest {path} must have header 'path,label'")
        entries = []
        labels: list = []
        for row in rows:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            entries.append((p, row["label"]))
            if row["label"] not in labels:
                labels.append(row["label"])
        return cls(entries, sorted(labels))


def load_labeled_flows(manifest: DatasetManifest, timeout_us: int = DEFAULT_TIMEOUT_US,
                       background_ports=BACKGROUND_PORTS) -> tuple:
    """Read every capture of the manifest into labelled flows.

    Returns ``(flows, skipped)``; flow labels are indices into
    ``manifest.class_labels``.
    """
    flows = []
    skipped: Counter = Counter()
    for path, label in manifest.entries:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read capture {path}: {exc}") from exc
        try:
            packets, skip = parse_pcap(data)
        except PcapError as exc:
            raise PcapError(f"{path}: {exc}", None, exc.packets) from exc
        skipped.update(skip)
        packets = filter_background(packets, background_ports)
        packets.sort(key=lambda p: p.timestamp_us)
        flows.extend(assemble_flows(packets, timeout_us, manifest.class_labels.index(label)))
    return flows, skipped


# ------------------------------------------------------- balancing, splitting

def balance(samples_per_class: dict, target_count: int, seed: int = 0) -> dict:
    """Undersample large classes and replicate small ones to ``target_count``."""
    if target_count < 1:
        raise DataError("target_count must be >= 1")
    rng = np.random.default_rng(seed)
    out = {}
    for label in sorted(samples_per_class):
        items = list(samples_per_class[label])
        if not items:
            raise DataError(f"class {label!r} has no samples")
        n = len(items)
        if n == target_count:
            out[label] = items
        elif n > target_count:
            keep = np.sort(rng.choice(n, size=target_count, replace=False))
            out[label] = [items[i] for i in keep]
        else:
            copies, rest = divmod(target_count, n)
            extra = np.sort(rng.choice(n, size=rest, replace=False))
            out[label] = items * copies + [items[i] for i in extra]
    return out


@dataclass
class Subset:
    items: list
    labels: np.ndarray

    def __len__(self):
        return len(self.items)

    def of_class(self, label: int) -> list:
        return [it for it, y in zip(self.items, self.labels) if y == label]


@dataclass
class SplitDataset:
    train: Subset
    validation: Subset
    test: Subset
    split_fractions: tuple = DEFAULT_FRACTIONS
    seed: int = 0
    class_labels: list = field(default_factory=list)


def _split_sizes(n: int, fractions) -> tuple:
    n_val = max(1, round(fractions[1] * n)) if fractions[1] > 0 else 0
    n_test = max(1, round(fractions[2] * n)) if fractions[2] > 0 else 0
    return n - n_val - n_test, n_val, n_test


def split(items: Sequence, labels: Sequence[int], fractions=DEFAULT_FRACTIONS,
          seed: int = 0, class_labels=None) -> SplitDataset:
    """Stratified, seeded train/validation/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} do not sum to 1")
    labels = np.asarray(labels, dtype=np.int64)
    if len(items) != len(labels):
        raise DataError("items and labels differ in length")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        if len(idx) < 3:
            raise DataError(f"class {label} has {len(idx)} samples; cannot stratify")
        idx = idx[rng.permutation(len(idx))]
        n_tr, n_va, _ = _split_sizes(len(idx), fractions)
        if n_tr < 1:
            raise DataError(f"class {label} too small for fractions {fractions}")
        parts[0].extend(np.sort(idx[:n_tr]))
        parts[1].extend(np.sort(idx[n_tr:n_tr + n_va]))
        parts[2].extend(np.sort(idx[n_tr + n_va:]))
    subsets = []
    for part in parts:
        part = sorted(part)
        subsets.append(Subset([items[i] for i in part], labels[part] if part else
                              np.zeros(0, np.int64)))
    return SplitDataset(*subsets, split_fractions=tuple(fractions), seed=seed,
                        class_labels=list(class_labels or []))


def balance_subset(subset: Subset, target_count: Optional[int], seed: int) -> Subset:
    per_class = {int(y): subset.of_class(int(y)) for y in np.unique(subset.labels)}
    if target_count is None:
        target_count = int(np.median([len(v) for v in per_class.values()]))
    balanced = balance(per_class, target_count, seed)
    items, labels = [], []
    for label, group in balanced.items():
        items.extend(group)
        labels.extend([label] * len(group))
    return Subset(items, np.asarray(labels, dtype=np.int64))


# ------------------------------------------------------------------- bundle
#
# A record file is a sequence of flow blocks: u32 record count, then that many
# u32-length-prefixed packet records.  Packet-level bundles use one-record
# blocks.  Record layout (little-endian):
#   u16 label | u64 timestamp_us | 13-byte tuple | u16 hlen + header | u16 plen + payload

SPLITS = ("train", "validation", "test")


def encode_record(pkt: Packet, label: int) -> bytes:
    return (struct.pack("<HQ", label, pkt.timestamp_us) + pkt.tuple.to_bytes()
            + struct.pack("<H", len(pkt.tl_header)) + pkt.tl_header
            + struct.pack("<H", len(pkt.payload)) + pkt.payload)


def decode_record(raw: bytes) -> tuple:
    try:
        label, ts = struct.unpack_from("<HQ", raw, 0)
        tup = FiveTuple.from_bytes(raw[10:23])
        (hlen,) = struct.unpack_from("<H", raw, 23)
        hdr = raw[25:25 + hlen]
        (plen,) = struct.unpack_from("<H", raw, 25 + hlen)
        payload = raw[27 + hlen:27 + hlen + plen]
    except struct.error as exc:
        raise DataError(f"corrupt bundle record: {exc}") from exc
    if len(hdr) != hlen or len(payload) != plen or 27 + hlen + plen != len(raw):
        raise DataError("corrupt bundle record: length mismatch")
    return Packet(ts, tup, hdr, payload), label


def write_records(path, flows: Sequence[BidirectionalFlow]) -> None:
    out = bytearray()
    for flow in flows:
        out += struct.pack("<I", len(flow.packets))
        for pkt in flow.packets:
            rec = encode_record(pkt, flow.label)
            out += struct.pack("<I", len(rec)) + rec
    Path(path).write_bytes(bytes(out))


def read_records(path, timeout_us: int = DEFAULT_TIMEOUT_US) -> list:
    data = Path(path).read_bytes()
    flows = []
    off = 0
    while off < len(data):
        if off + 4 > len(data):
            raise DataError(f"{path}: truncated block header at {off}")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        pkts = []
        label = None
        for _ in range(count):
            if off + 4 > len(data):
                raise DataError(f"{path}: truncated record at {off}")
            (rlen,) = struct.unpack_from("<I", data, off)
            pkt, label = decode_record(data[off + 4:off + 4 + rlen])
            pkts.append(pkt)
            off += 4 + rlen
        if not pkts:
            raise DataError(f"{path}: empty flow block")
        first = pkts[0].tuple
        flow = BidirectionalFlow(first, timeout_us, [], label)
        flow.packets = [p.with_direction(1 if p.tuple == first else -1) for p in pkts]
        flows.append(flow)
    return flows


def write_bundle(out_dir, dataset: SplitDataset, timeout_us: int, extra_meta=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name in SPLITS:
        subset = getattr(dataset, name)
        flows = []
        for item, label in zip(subset.items, subset.labels):
            flows.append(BidirectionalFlow(item.tuple, item.timeout_us, item.packets, int(label)))
        write_records(out_dir / f"{name}.bin", flows)
        counts[name] = {dataset.class_labels[c]: int((subset.labels == c).sum())
                        for c in range(len(dataset.class_labels))}
    meta = {
        "class_labels": list(dataset.class_labels),
        "seed": dataset.seed,
        "split_fractions": list(dataset.split_fractions),
        "timeout_us": timeout_us,
        "counts": counts,
    }
    meta.update(extra_meta or {})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_bundle(bundle_dir) -> SplitDataset:
    bundle_dir = Path(bundle_dir)
    try:
        meta = json.loads((bundle_dir / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{bundle_dir}: not a dataset bundle ({exc})") from exc
    subsets = []
    for name in SPLITS:
        flows = read_records(bundle_dir / f"{name}.bin", meta["timeout_us"])
        subsets.append(Subset(flows, np.asarray([f.label for f in flows], dtype=np.int64)))
    return SplitDataset(*subsets, split_fractions=tuple(meta["split_fractions"]),
                        seed=meta["seed"], class_labels=list(meta["class_labels"]))
