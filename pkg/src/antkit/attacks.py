"""Universal perturbation generators, their application, and baselines.

Three placements are supported, one per input space:

* padding bytes spliced at the start or end of a packet payload (PC),
* the payload of a dummy packet injected into the first ``n`` packets of a
  flow (FCC),
* statistical features of ``d`` dummy packets appended to a selected burst
  (FTSC).

Each placement is expressed as a :class:`Splice`: a base batch with holes
plus the coordinates the perturbation fills.  Generation and application
share it, so the gradient taken during generation is exactly the gradient of
the input the classifier later sees.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DataError, IncompatibleError
from .features import (EncodedSample, Encoding, Kind, NormStats, bytes_to_unit, decode_iat,
                       decode_ps, encode, encode_flow_content, normalize_iat, normalize_ps,
                       packet_bytes, payload_packets, signed_series)
from .nn import Model
from .traffic import BidirectionalFlow, Packet, burst_directions

logger = logging.getLogger(__name__)

UAP_MAGIC = b"ANTU"
UAP_VERSION = 1

START, END = "start", "end"
AFTER_FIRST_FORWARD = "after_first_forward"
FIRST_FORWARD, FIRST_BACKWARD = "first_forward", "first_backward"

DUMMY_PS_MIN = 40
DUMMY_IAT_RANGE_US = (1_000, 100_000)
DEFAULT_PORT_RANGE = (1024, 65535)

ADV_KINDS = ("advpad", "advpay", "advburst")
RAND_KINDS = {"randpad": "advpad", "randpay": "advpay", "randburst": "advburst"}
VALID_PAIRS = {"advpad": (Kind.PC_HP, Kind.PC_P), "advpay": (Kind.FCC_HP, Kind.FCC_P),
               "advburst": (Kind.FTSC_PS, Kind.FTSC_IAT)}


# ------------------------------------------------------------------ domains

@dataclass(frozen=True)
class ClipDomain:
    lower: float
    upper: float
    sign: Optional[int] = None

    def __post_init__(self):
        if self.lower > self.upper:
            raise DataError(f"empty clip domain [{self.lower}, {self.upper}]")

    def contains(self, values) -> bool:
        v = np.asarray(values, dtype=np.float64)
        if self.sign:
            v = v * self.sign
        return bool(np.all((v >= self.lower) & (v <= self.upper)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        v = rng.uniform(self.lower, self.upper, size).astype(np.float32)
        return clip(v, self)


def clip(values, domain: ClipDomain) -> np.ndarray:
    """Clamp into the domain; a signed domain is the mirror image of [lower, upper]."""
    v = np.asarray(values)
    if domain.sign:
        return (domain.sign * np.clip(domain.sign * v, domain.lower, domain.upper)).astype(v.dtype)
    return np.clip(v, domain.lower, domain.upper).astype(v.dtype)


def _f32_inside(lo: float, hi: float) -> tuple:
    lo32, hi32 = np.float32(lo), np.float32(hi)
    # compare in float64; a bare float would be cast down to float32 first
    if float(lo32) < lo:
        lo32 = np.nextafter(lo32, np.float32(np.inf))
    if float(hi32) > hi:
        hi32 = np.nextafter(hi32, np.float32(-np.inf))
    return float(lo32), float(hi32)


def clip_domain(attack: str, encoding: Encoding, stats: Optional[NormStats] = None,
                feature: Optional[str] = None) -> ClipDomain:
    """Domain of the (unsigned) perturbation values for an attack."""
    attack = RAND_KINDS.get(attack, attack)
    if attack in ("advpad", "advpay"):
        return ClipDomain(0.0, 1.0)
    if stats is None:
        raise DataError("burst perturbations need NormStats")
    if (feature or _feature_of(encoding)) == "PS":
        lo, hi = normalize_ps([DUMMY_PS_MIN, encoding.max_pkt_size], stats)
    else:
        lo, hi = normalize_iat(list(DUMMY_IAT_RANGE_US), stats)
    return ClipDomain(*_f32_inside(float(lo), float(hi)))


def _feature_of(encoding: Encoding) -> str:
    return "PS" if encoding.kind == Kind.FTSC_PS else "IAT"


# ---------------------------------------------------------------------- UAP

@dataclass
class Uap:
    values: np.ndarray
    target_class: int
    encoding: Encoding
    attack: str
    params: dict
    gen_params: dict = field(default_factory=dict)
    source_model_id: Optional[str] = None
    norm_stats: Optional[NormStats] = None
    history: list = field(default_factory=list, repr=False, compare=False)

    def metadata(self) -> dict:
        return {"target_class": self.target_class, "encoding": self.encoding.to_dict(),
                "attack": self.attack, "params": self.params, "gen_params": self.gen_params,
                "source_model_id": self.source_model_id,
                "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None}


def uap_to_bytes(uap: Uap) -> bytes:
    js = json.dumps(uap.metadata(), sort_keys=True).encode()
    vals = np.ascontiguousarray(uap.values, dtype="<f4").tobytes()
    body = UAP_MAGIC + struct.pack("<HI", UAP_VERSION, len(js)) + js + vals
    return body + struct.pack("<I", zlib.crc32(body))


def uap_from_bytes(data: bytes) -> Uap:
    if data[:4] != UAP_MAGIC:
        raise DataError("not a UAP file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise DataError("UAP file checksum mismatch")
    version, jlen = struct.unpack_from("<HI", body, 4)
    if version != UAP_VERSION:
        raise DataError(f"unsupported UAP format version {version}")
    meta = json.loads(body[10:10 + jlen])
    vals = np.frombuffer(body[10 + jlen:], dtype="<f4").astype(np.float32)
    return Uap(vals, meta["target_class"], Encoding.from_dict(meta["encoding"]), meta["attack"],
               meta["params"], meta["gen_params"], meta["source_model_id"],
               NormStats(**meta["norm_stats"]) if meta["norm_stats"] else None)


def save_uap(uap: Uap, path) -> None:
    Path(path).write_bytes(uap_to_bytes(uap))


def load_uap(path) -> Uap:
    return uap_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------- splice

@dataclass
class Splice:
    """Batch of inputs with holes, and where each perturbation value lands."""
    base: np.ndarray      # (B, L)
    rows: np.ndarray
    cols: np.ndarray
    xi_idx: np.ndarray
    coef: np.ndarray      # direction sign applied to the perturbation value

    @classmethod
    def stack(cls, parts: Sequence[tuple], length: int) -> "Splice":
        base = np.zeros((len(parts), length), dtype=np.float32)
        rows, cols, idx, coef = [], [], [], []
        for i, (row, c, xi, sign) in enumerate(parts):
            base[i] = row
            rows.append(np.full(len(c), i))
            cols.append(c)
            idx.append(xi)
            coef.append(np.full(len(c), sign, dtype=np.float32))
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
        return cls(base, cat(rows, np.int64), cat(cols, np.int64), cat(idx, np.int64),
                   cat(coef, np.float32))

    def assemble(self, xi, dtype=np.float32) -> np.ndarray:
        x = self.base.astype(dtype)
        if len(self.cols):
            x[self.rows, self.cols] = self.coef.astype(dtype) * np.asarray(xi, dtype=dtype)[self.xi_idx]
        return x

    def grad_xi(self, dx, size: int) -> np.ndarray:
        if not len(self.cols):
            return np.zeros(size, dtype=np.float64)
        w = self.coef.astype(np.float64) * np.asarray(dx, dtype=np.float64)[self.rows, self.cols]
        return np.bincount(self.xi_idx, weights=w, minlength=size)[:size]

    def loss_and_grad(self, model: Model, xi, label: int, reduction: str = "mean") -> tuple:
        """Batch loss and its gradient in the perturbation.

        ``reduction="sum"`` accumulates per-sample losses instead of averaging them.
        """
        x = self.assemble(xi, model.dtype)
        loss, _, dx = model.loss_and_grads(x, np.full(len(x), label))
        g = self.grad_xi(dx, len(xi))
        if reduction == "sum":
            return loss * len(x), g * len(x)
        if reduction != "mean":
            raise DataError(f"unknown loss reduction {reduction!r}")
        return loss, g


# ------------------------------------------------------------- AdvPad rows

def pad_size(pkt: Packet, overhead_pct: float) -> int:
    return int(math.floor(pkt.size * overhead_pct / 100.0 + 1e-9))


def _pad_part(pkt: Packet, encoding: Encoding, loc: str, overhead_pct: float):
    L = encoding.max_pkt_size
    hdr = pkt.tl_header if encoding.kind == Kind.PC_HP else b""
    ps = min(pad_size(pkt, overhead_pct), L)
    if loc == START:
        head, tail, at = hdr, pkt.payload, len(hdr)
    elif loc == END:
        head, tail, at = hdr + pkt.payload, b"", len(hdr) + len(pkt.payload)
    else:
        raise DataError(f"pad location must be 'start' or 'end', got {loc!r}")
    row = np.zeros(L, dtype=np.float32)
    h = bytes_to_unit(head, L)[:min(len(head), L)]
    row[:len(h)] = h
    cols = np.arange(at, at + ps)
    cols = cols[cols < L]
    t_at = at + ps
    if t_at < L and tail:
        t = bytes_to_unit(tail, L - t_at)
        row[t_at:] = t
    return row, cols, np.arange(len(cols)), 1.0


# ------------------------------------------------------------- AdvPay rows

def resolve_dummy_index(flow: BidirectionalFlow, policy) -> int:
    """Slot of the dummy packet among the flow's payload-bearing packets."""
    if isinstance(policy, (int, np.integer)):
        return int(policy)
    if policy == AFTER_FIRST_FORWARD:
        for j, p in enumerate(payload_packets(flow)):
            if p.direction == 1:
                return j + 1
        raise DataError("flow has no source->destination packet")
    raise DataError(f"unknown dummy index policy {policy!r}")


def _pay_part(flow: BidirectionalFlow, encoding: Encoding, size: int, policy,
              displace_last: bool = True, clean: Optional[np.ndarray] = None):
    n, L = encoding.n, encoding.max_pkt_size
    pkts = payload_packets(flow)
    k = resolve_dummy_index(flow, policy)
    if k >= n:
        raise DataError(f"dummy index {k} outside the {n}-packet window")
    if k > len(pkts):
        raise DataError(f"flow has {len(pkts)} packets, shorter than dummy index {k}")
    if clean is None:
        clean = encode_flow_content(flow, encoding.kind, n, L).values
    slots = clean.reshape(n, L)
    sign = pkts[k - 1].direction if k >= 1 else 1
    hdr = pkts[k - 1].tl_header if (encoding.kind == Kind.FCC_HP and k >= 1) else b""
    if encoding.kind == Kind.FCC_HP and k == 0:
        hdr = pkts[0].tl_header
    width = n + (0 if displace_last else 1)
    row = np.zeros(width * L, dtype=np.float32)
    row[:k * L] = slots[:k].reshape(-1)
    dummy = np.zeros(L, dtype=np.float32)
    h = bytes_to_unit(hdr, L)[:len(hdr)]
    dummy[:len(h)] = h * sign
    row[k * L:(k + 1) * L] = dummy
    rest = slots[k:width - 1]
    row[(k + 1) * L:(k + 1 + len(rest)) * L] = rest.reshape(-1)
    cols = k * L + len(hdr) + np.arange(size)
    keep = cols < (k + 1) * L
    return row, cols[keep], np.arange(size)[keep], float(sign)


# ----------------------------------------------------------- AdvBurst rows

def resolve_burst(flow: BidirectionalFlow, policy) -> Optional[tuple]:
    """``(direction, start, stop)`` of the selected burst, or None if absent."""
    bursts = burst_directions(flow.directions)
    if isinstance(policy, (int, np.integer)):
        return bursts[int(policy)] if 0 <= int(policy) < len(bursts) else None
    want = {FIRST_FORWARD: 1, FIRST_BACKWARD: -1}.get(policy)
    if want is None:
        raise DataError(f"unknown burst policy {policy!r}")
    for b in bursts:
        if b[0] == want:
            return b
    return None


def default_burst_policy(encoding: Encoding) -> str:
    return FIRST_FORWARD if encoding.kind == Kind.FTSC_PS else FIRST_BACKWARD


class BurstMissing(DataError):
    pass


def _burst_part(flow: BidirectionalFlow, encoding: Encoding, d: int, policy,
                stats: NormStats, series: Optional[np.ndarray] = None):
    sel = resolve_burst(flow, policy)
    if sel is None:
        raise BurstMissing(f"flow lacks burst {policy!r}")
    direction, _, stop = sel
    if series is None:
        series = signed_series(flow, encoding.kind, stats)
    length = encoding.length
    # PS: one value per packet; IAT: value k belongs to packet k+1
    pos = stop if encoding.kind == Kind.FTSC_PS else stop - 1
    row = np.zeros(length, dtype=np.float32)
    head = series[:min(pos, length)]
    row[:len(head)] = head
    tail_at = pos + d
    if tail_at < length:
        tail = series[pos:pos + length - tail_at]
        row[tail_at:tail_at + len(tail)] = tail
    cols = pos + np.arange(d)
    keep = cols < length
    return row, cols[keep], np.arange(d)[keep], float(direction)


# ----------------------------------------------------------------- ascent

def _check_model(model: Model, attack: str) -> Encoding:
    enc = model.encoding
    if enc is None or enc.kind not in VALID_PAIRS[attack]:
        got = enc.kind.name if enc else None
        raise IncompatibleError(
            f"{attack} needs a model over {[k.name for k in VALID_PAIRS[attack]]}, got {got}")
    return enc


def _ascend(xi, parts, model, label, iterations, batch_size, eps, domain, rng, history,
            reduction, on_batch=None):
    n = len(parts)
    length = model.spec.input_length
    for t in range(iterations):
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        batch = [parts[i] for i in idx]
        if on_batch is not None:
            on_batch(batch)
        splice = Splice.stack(batch, length)
        loss, g = splice.loss_and_grad(model, xi, label, reduction)
        xi = clip((xi + eps * g).astype(np.float32), domain)
        history.append(loss / len(batch) if reduction == "sum" else loss)
    return xi


def _no_pad(batch):
    if all(len(p[1]) == 0 for p in batch):
        raise DataError("pad size is 0 for every packet in the batch; increase the overhead")


def gen_advpad(packets: Sequence[Packet], target_class: int, model: Model, loc: str = START,
               overhead_pct: float = 20.0, iterations: int = 1000, batch_size: int = 128,
               eps: float = 0.01, seed: int = 0, reduction: str = "sum") -> Uap:
    enc = _check_model(model, "advpad")
    if not packets:
        raise DataError("no packets to generate a pad from")
    if not 0 < overhead_pct <= 100:
        raise DataError("overhead percentage must lie in (0, 100]")
    rng = np.random.default_rng(seed)
    domain = clip_domain("advpad", enc)
    xi = domain.sample(rng, enc.max_pkt_size)
    parts = [_pad_part(p, enc, loc, overhead_pct) for p in packets]
    history: list = []
    xi = _ascend(xi, parts, model, target_class, iterations, batch_size, eps, domain, rng,
                 history, reduction, _no_pad)
    return Uap(xi, target_class, enc, "advpad", {"loc": loc, "overhead_pct": overhead_pct},
               {"iterations": iterations, "batch_size": batch_size, "eps": eps, "seed": seed,
                "reduction": reduction},
               model.model_id(), None, history)


def gen_advpay(flows: Sequence[BidirectionalFlow], target_class: int, model: Model,
               size: int = 128, dummy_index=AFTER_FIRST_FORWARD, iterations: int = 1000,
               batch_size: int = 64, eps: float = 0.001, seed: int = 0,
               displace_last: bool = True, reduction: str = "sum") -> Uap:
    enc = _check_model(model, "advpay")
    if not flows:
        raise DataError("no flows to generate a payload from")
    max_hdr = max(len(p.tl_header) for f in flows for p in f.packets) if enc.kind == Kind.FCC_HP else 0
    if not 1 <= size <= enc.max_pkt_size - max_hdr:
        raise DataError(f"payload size must lie in [1, {enc.max_pkt_size - max_hdr}]")
    rng = np.random.default_rng(seed)
    domain = clip_domain("advpay", enc)
    xi = np.zeros(size, dtype=np.float32)
    parts = [_pay_part(f, enc, size, dummy_index, displace_last) for f in flows]
    history: list = []
    xi = _ascend(xi, parts, model, target_class, iterations, batch_size, eps, domain, rng,
                 history, reduction)
    return Uap(xi, target_class, enc, "advpay",
               {"size": size, "dummy_index": dummy_index, "displace_last": displace_last},
               {"iterations": iterations, "batch_size": batch_size, "eps": eps, "seed": seed,
                "reduction": reduction},
               model.model_id(), None, history)


def gen_advburst(flows: Sequence[BidirectionalFlow], target_class: int, model: Model,
                 dummy_count: int = 5, selected_burst=None, iterations: int = 2000,
                 batch_size: int = 64, eps: float = 0.01, seed: int = 0,
                 reduction: str = "sum") -> Uap:
    enc = _check_model(model, "advburst")
    stats = model.norm_stats
    if dummy_count < 1:
        raise DataError("dummy_count must be >= 1")
    policy = selected_burst if selected_burst is not None else default_burst_policy(enc)
    parts, skipped = [], 0
    for f in flows:
        try:
            parts.append(_burst_part(f, enc, dummy_count, policy, stats))
        except BurstMissing:
            skipped += 1
    if not parts:
        raise DataError(f"no flow contains burst {policy!r} ({skipped} skipped)")
    rng = np.random.default_rng(seed)
    domain = clip_domain("advburst", enc, stats)
    xi = domain.sample(rng, dummy_count)
    history: list = []
    xi = _ascend(xi, parts, model, target_class, iterations, batch_size, eps, domain, rng,
                 history, reduction)
    return Uap(xi, target_class, enc, "advburst",
               {"dummy_count": dummy_count, "selected_burst": policy,
                "feature": _feature_of(enc)},
               {"iterations": iterations, "batch_size": batch_size, "eps": eps, "seed": seed,
                "reduction": reduction, "skipped": skipped},
               model.model_id(), stats, history)


# ------------------------------------------------------------------ apply

def _base_attack(uap: Uap) -> str:
    return RAND_KINDS.get(uap.attack, uap.attack)


def _require(uap: Uap, attack: str):
    if _base_attack(uap) != attack:
        raise IncompatibleError(f"expected a {attack} perturbation, got {uap.attack}")


def apply_advpad(pkt: Packet, uap: Uap, loc: Optional[str] = None,
                 overhead_pct: Optional[float] = None) -> EncodedSample:
    _require(uap, "advpad")
    loc = loc or uap.params["loc"]
    oh = uap.params["overhead_pct"] if overhead_pct is None else overhead_pct
    row, cols, idx, _ = _pad_part(pkt, uap.encoding, loc, oh)
    row[cols] = uap.values[idx]
    return EncodedSample(row, uap.target_class, uap.encoding.kind)


def apply_advpay(flow: BidirectionalFlow, uap: Uap, dummy_index=None) -> EncodedSample:
    _require(uap, "advpay")
    policy = uap.params["dummy_index"] if dummy_index is None else dummy_index
    row, cols, idx, sign = _pay_part(flow, uap.encoding, len(uap.values), policy,
                                     uap.params.get("displace_last", True))
    row[cols] = sign * uap.values[idx]
    return EncodedSample(row, uap.target_class, uap.encoding.kind)


def apply_advburst(flow: BidirectionalFlow, uap: Uap, selected_burst=None,
                   stats: Optional[NormStats] = None) -> EncodedSample:
    _require(uap, "advburst")
    stats = stats or uap.norm_stats
    d = len(uap.values)
    if d == 0:
        return EncodedSample(encode(flow, uap.encoding, stats), uap.target_class,
                             uap.encoding.kind)
    policy = uap.params["selected_burst"] if selected_burst is None else selected_burst
    row, cols, idx, sign = _burst_part(flow, uap.encoding, d, policy, stats)
    row[cols] = sign * uap.values[idx]
    return EncodedSample(row, uap.target_class, uap.encoding.kind)


def apply_uap(item, uap: Uap, stats: Optional[NormStats] = None) -> np.ndarray:
    attack = _base_attack(uap)
    if attack == "advpad":
        return apply_advpad(item, uap).values
    if attack == "advpay":
        return apply_advpay(item, uap).values
    return apply_advburst(item, uap, stats=stats).values


def apply_many(items: Sequence, uap: Uap, stats: Optional[NormStats] = None) -> tuple:
    """Perturbed encodings of many items.

    Returns ``(X, applied)``; items the placement cannot reach (a flow without
    the selected burst) keep their clean encoding and are flagged False.
    """
    stats = stats or uap.norm_stats
    X = np.zeros((len(items), uap.encoding.length), dtype=np.float32)
    applied = np.ones(len(items), dtype=bool)
    for i, item in enumerate(items):
        try:
            X[i] = apply_uap(item, uap, stats)
        except BurstMissing:
            X[i] = encode(item, uap.encoding, stats)
            applied[i] = False
    return X, applied


# ----------------------------------------------------------- materialize

def quantize(values) -> bytes:
    return bytes(np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255)
                 .astype(np.uint8).tolist())


def materialize_advpad(pkt: Packet, uap: Uap, loc=None, overhead_pct=None) -> Packet:
    loc = loc or uap.params["loc"]
    oh = uap.params["overhead_pct"] if overhead_pct is None else overhead_pct
    pad = quantize(uap.values[:pad_size(pkt, oh)])
    payload = pad + pkt.payload if loc == START else pkt.payload + pad
    return dataclasses.replace(pkt, payload=payload)


def materialize_advpay(flow: BidirectionalFlow, uap: Uap, dummy_index=None) -> BidirectionalFlow:
    """Insert a real dummy packet carrying the quantized payload."""
    policy = uap.params["dummy_index"] if dummy_index is None else dummy_index
    pkts = payload_packets(flow)
    k = resolve_dummy_index(flow, policy)
    prev = pkts[k - 1] if k >= 1 else pkts[0]
    sign = prev.direction if k >= 1 else 1
    tup = flow.tuple if sign == 1 else flow.tuple.reverse()
    dummy = Packet(prev.timestamp_us, tup, prev.tl_header, quantize(uap.values), sign)
    at = flow.packets.index(prev) + (1 if k >= 1 else 0)
    new = flow.packets[:at] + [dummy] + flow.packets[at:]
    return BidirectionalFlow(flow.tuple, flow.timeout_us, new, flow.label)


def materialize_advburst(flow: BidirectionalFlow, uap: Uap, selected_burst=None) -> BidirectionalFlow:
    """Insert ``d`` dummy packets with decoded sizes (PS) or spacing (IAT)."""
    stats = uap.norm_stats
    policy = uap.params["selected_burst"] if selected_burst is None else selected_burst
    sel = resolve_burst(flow, policy)
    if sel is None:
        raise BurstMissing(f"flow lacks burst {policy!r}")
    direction, _, stop = sel
    last = flow.packets[stop - 1]
    tup = flow.tuple if direction == 1 else flow.tuple.reverse()
    hlen = len(last.tl_header)
    dummies, delay = [], 0
    for v in uap.values:
        if uap.params["feature"] == "PS":
            size = int(np.clip(round(decode_ps(float(v), stats)), DUMMY_PS_MIN, uap.encoding.max_pkt_size))
            ts = last.timestamp_us
        else:
            size = last.size
            delay += decode_iat(float(v), stats)
            ts = last.timestamp_us + delay
        dummies.append(Packet(ts, tup, last.tl_header, bytes(max(size - hlen, 1)), direction))
    later = [dataclasses.replace(p, timestamp_us=p.timestamp_us + delay)
             for p in flow.packets[stop:]]
    return BidirectionalFlow(flow.tuple, flow.timeout_us,
                             flow.packets[:stop] + dummies + later, flow.label)


# ------------------------------------------------------------- baselines

def rand_baseline(kind: str, encoding: Encoding, target_class: int, params: dict, runs: int = 50,
                  seed: int = 0, stats: Optional[NormStats] = None) -> list:
    """``runs`` uniform-random perturbations with the placement of the adversarial twin."""
    if runs < 1:
        raise DataError("runs must be >= 1")
    base = RAND_KINDS.get(kind)
    if base is None:
        raise DataError(f"unknown baseline {kind!r}")
    if encoding.kind not in VALID_PAIRS[base]:
        raise IncompatibleError(f"{kind} does not apply to {encoding.kind.name}")
    domain = clip_domain(base, encoding, stats)
    size = {"advpad": encoding.max_pkt_size, "advpay": params.get("size", 0),
            "advburst": params.get("dummy_count", 0)}[base]
    params = dict(params)
    if base == "advburst":
        params.setdefault("selected_burst", default_burst_policy(encoding))
        params.setdefault("feature", _feature_of(encoding))
    rng = np.random.default_rng(seed)
    return [Uap(domain.sample(rng, size), target_class, encoding, kind, params,
                {"seed": seed, "run": r}, None, stats) for r in range(runs)]


# ------------------------------------------------------------ port attack

def _port_bytes(a: int, b: int) -> bytes:
    return a.to_bytes(2, "big") + b.to_bytes(2, "big")


def port_attack(obj, kind: Kind, port_range=DEFAULT_PORT_RANGE, seed=0, max_pkt_size=None):
    """Replace source/destination ports with a random pair drawn per flow.

    ``obj`` may be a :class:`Packet`, a :class:`BidirectionalFlow`, or an
    encoded vector of ``kind`` (which needs ``max_pkt_size`` for FCC_HP).
    """
    kind = Kind(kind)
    if not kind.with_header:
        raise IncompatibleError(f"port attack needs a header-bearing encoding, got {kind.name}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = port_range
    a, b = (int(p) for p in rng.integers(lo, hi + 1, size=2))

    def rewrite(pkt: Packet, forward: bool) -> Packet:
        s, d = (a, b) if forward else (b, a)
        tup = dataclasses.replace(pkt.tuple, src_port=s, dst_port=d)
        return dataclasses.replace(pkt, tuple=tup, tl_header=_port_bytes(s, d) + pkt.tl_header[4:])

    if isinstance(obj, Packet):
        return rewrite(obj, True)
    if isinstance(obj, BidirectionalFlow):
        tup = dataclasses.replace(obj.tuple, src_port=a, dst_port=b)
        return BidirectionalFlow(tup, obj.timeout_us,
                                 [rewrite(p, p.direction == 1) for p in obj.packets], obj.label)
    x = np.array(obj, dtype=np.float32, copy=True)
    if kind == Kind.PC_HP:
        x[:4] = np.frombuffer(_port_bytes(a, b), np.uint8) / np.float32(255)
        return x
    if max_pkt_size is None:
        raise DataError("max_pkt_size is needed to locate FCC_HP header slots")
    for start in range(0, len(x), max_pkt_size):
        slot = x[start:start + max_pkt_size]
        nz = np.flatnonzero(slot)
        if not len(nz):
            continue
        sign = np.sign(slot[nz[0]])
        pair = _port_bytes(a, b) if sign > 0 else _port_bytes(b, a)
        slot[:4] = sign * np.frombuffer(pair, np.uint8) / np.float32(255)
    return x
