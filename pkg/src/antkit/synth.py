"""Seeded synthetic traffic corpus for desk-scale experiments.

Four classes differ in payload byte statistics, packet sizes, burst shape,
inter-arrival times and (partially) server ports.  Flows are built directly
as :class:`BidirectionalFlow` objects and can be written out as one pcap per
class plus a manifest.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import tcp_header, udp_header, write_pcap
from .traffic import TCP, UDP, BidirectionalFlow, FiveTuple, Packet

CLASS_NAMES = ("chat", "file_transfer", "streaming", "voip")


@dataclass(frozen=True)
class ClassProfile:
    name: str
    proto: int
    server_ports: tuple
    fwd_burst: tuple       # (min, max) packets per client->server burst
    bwd_burst: tuple
    fwd_payload: tuple     # (min, max) payload bytes
    bwd_payload: tuple
    iat_in_burst_us: tuple  # (low, high) log-uniform
    iat_between_us: tuple


PROFILES = {
    "chat": ClassProfile("chat", TCP, (5222, 443), (1, 3), (1, 3), (20, 160), (20, 160),
                         (2_000, 12_000), (200_000, 3_000_000)),
    "file_transfer": ClassProfile("file_transfer", TCP, (21, 22, 443), (3, 8), (1, 2),
                                  (120, 236), (12, 80), (100, 600), (1_000, 5_000)),
    "streaming": ClassProfile("streaming", TCP, (1935, 443, 8080), (1, 2), (4, 12),
                              (40, 160), (140, 236), (50, 300), (20_000, 80_000)),
    "voip": ClassProfile("voip", UDP, (3478, 5060, 443), (1, 3), (1, 3), (80, 160),
                         (80, 160), (18_000, 22_000), (18_000, 22_000)),
}


def _alphabets(rng: np.random.Generator, k: int) -> list:
    # contiguous byte-value bands, one per class, in shuffled order
    width = 256 // k
    order = rng.permutation(k)
    return [np.arange(order[i] * width, (order[i] + 1) * width) for i in range(k)]


def _payload(rng, n: int, alphabet, p_sig: float) -> bytes:
    sig = rng.random(n) < p_sig
    out = rng.integers(0, 256, n)
    out[sig] = rng.choice(alphabet, sig.sum())
    return bytes(out.astype(np.uint8).tolist())


def _loguniform(rng, lo, hi):
    return int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))


def generate_flows(flows_per_class: int = 500, seed: int = 0, packets: tuple = (12, 28),
                   p_sig: float = 0.5, shared_port_prob: float = 0.5,
                   class_names=CLASS_NAMES) -> list:
    """Labelled flows, ordered by class then start time."""
    rng = np.random.default_rng(seed)
    alphabets = _alphabets(rng, len(class_names))
    flows = []
    for label, name in enumerate(class_names):
        prof = PROFILES[name]
        server_ip = int.from_bytes(bytes([192, 0, 2 + label, 10]), "big")
        client_ports = rng.choice(np.arange(1024, 65536), flows_per_class, replace=False)
        starts = np.sort(rng.uniform(0, 3_600_000_000, flows_per_class)).astype(np.int64)
        for i in range(flows_per_class):
            client_ip = int.from_bytes(bytes([10, label, int(rng.integers(0, 256)),
                                              int(rng.integers(1, 255))]), "big")
            sport = 443 if rng.random() < shared_port_prob else int(rng.choice(prof.server_ports))
            fwd = FiveTuple(client_ip, server_ip, int(client_ports[i]), sport, prof.proto)
            n_pkts = int(rng.integers(packets[0], packets[1] + 1))
            seq, ack = int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32))
            ts = int(starts[i])
            pkts = []
            direction = 1
            while len(pkts) < n_pkts:
                lo, hi = prof.fwd_burst if direction == 1 else prof.bwd_burst
                burst = int(rng.integers(lo, hi + 1))
                for j in range(min(burst, n_pkts - len(pkts))):
                    if pkts:
                        gap = prof.iat_in_burst_us if j else prof.iat_between_us
                        ts += _loguniform(rng, *gap)
                    plo, phi = prof.fwd_payload if direction == 1 else prof.bwd_payload
                    payload = _payload(rng, int(rng.integers(plo, phi + 1)), alphabets[label], p_sig)
                    tup = fwd if direction == 1 else fwd.reverse()
                    if prof.proto == TCP:
                        hdr = tcp_header(tup.src_port, tup.dst_port, seq if direction == 1 else ack,
                                         ack if direction == 1 else seq,
                                         window=int(rng.integers(1024, 65536)))
                        if direction == 1:
                            seq += len(payload)
                        else:
                            ack += len(payload)
                    else:
                        hdr = udp_header(tup.src_port, tup.dst_port, len(payload))
                    pkts.append(Packet(ts, tup, hdr, payload, direction))
                direction = -direction
            flows.append(BidirectionalFlow(fwd, 180_000_000, pkts, label))
    return flows


def write_corpus(out_dir, flows, class_names=CLASS_NAMES) -> Path:
    """One pcap per class plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, name in enumerate(class_names):
        pkts = [p for f in flows if f.label == label for p in f.packets]
        pkts.sort(key=lambda p: p.timestamp_us)
        path = out_dir / f"{name}.pcap"
        path.write_bytes(write_pcap(pkts))
        rows.append({"path": path.name, "label": name})
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "label"])
        w.writeheader()
        w.writerows(rows)
    return manifest
