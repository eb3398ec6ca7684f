import numpy as np
import pytest

from antkit import attacks as A
from antkit.errors import DataError, IncompatibleError
from antkit.features import (Encoding, Kind, NormStats, decode_iat, decode_ps, encode,
                             normalize_iat, normalize_ps, payload_packets)
from antkit.nn import Dense, ModelSpec, cnn_spec, new_model, softmax
from antkit.traffic import UDP

from helpers import flow_from, pkt, tup

STATS = NormStats(100.0, 40.0, 10_000_000)


def linear_model(enc, k=3, seed=0, stats=None):
    return new_model(ModelSpec((Dense(k),), enc.length, k), seed, encoding=enc, norm_stats=stats)


def hand_grad(model, x, label):
    """d CE / dx for a single-layer softmax model, in float64."""
    W = model.params[0]["W"].astype(np.float64)
    p = softmax(x.astype(np.float64) @ W + model.params[0]["b"])
    p[label] -= 1
    return W @ p


def uap(values, enc, attack, **params):
    return A.Uap(np.asarray(values, np.float32), 0, enc, attack, params, norm_stats=STATS)


# ------------------------------------------------------------------ AdvPad

PC_P = Encoding(Kind.PC_P, max_pkt_size=64)
PC_HP = Encoding(Kind.PC_HP, max_pkt_size=64)


def test_advpad_zero_iterations_is_seeded_init():
    m = linear_model(PC_P)
    u = A.gen_advpad([pkt(0, b"a" * 30)], 1, m, iterations=0, seed=42)
    expect = np.random.default_rng(42).uniform(0, 1, 64).astype(np.float32)
    assert np.array_equal(u.values, expect)


def test_advpad_one_step_matches_hand_gradient():
    m = linear_model(PC_P, seed=3)
    p = pkt(0, bytes(range(40, 80)))  # size 60, 50% -> 30 pad bytes
    eps = 0.5
    xi0 = A.gen_advpad([p], 2, m, A.START, 50, iterations=0, seed=7).values
    xi1 = A.gen_advpad([p], 2, m, A.START, 50, iterations=1, batch_size=1, eps=eps, seed=7).values
    x = np.zeros(64)
    x[:30] = xi0[:30]
    x[30:64] = np.frombuffer(p.payload[:34], np.uint8) / 255
    g = np.zeros(64)
    g[:30] = hand_grad(m, x, 2)[:30]
    assert np.allclose(xi1, np.clip(xi0 + eps * g, 0, 1), atol=1e-6)
    assert np.array_equal(xi1[30:], xi0[30:])


def test_advpad_output_domain():
    m = new_model(cnn_spec(64, 3), 0, encoding=PC_HP)
    pkts = [pkt(i, bytes([i] * (10 + i))) for i in range(10)]
    u = A.gen_advpad(pkts, 0, m, A.END, 30, iterations=5, batch_size=4, eps=5.0)
    assert len(u.values) == 64 and u.values.min() >= 0 and u.values.max() <= 1


@pytest.mark.parametrize("loc,expect", [(A.END, b"\xaa\xbb\x80"), (A.START, b"\x80\xaa\xbb")])
def test_pad_splice(loc, expect):
    p = pkt(0, b"\xaa\xbb")  # size 22; 5% -> one pad byte
    u = uap([128 / 255] + [0.0] * 63, PC_P, "advpad", loc=loc, overhead_pct=5)
    assert A.materialize_advpad(p, u).payload == expect
    row = A.apply_advpad(p, u).values
    assert np.allclose(row[:3] * 255, list(expect), atol=1e-4) and not row[3:].any()


def test_pad_keeps_header_first_for_hp():
    p = pkt(0, b"\xaa\xbb")
    u = uap(np.full(64, 0.5), PC_HP, "advpad", loc=A.START, overhead_pct=5)
    row = A.apply_advpad(p, u).values
    assert np.array_equal(row[:20], encode(p, PC_HP)[:20])
    assert row[20] == np.float32(0.5)


def test_pad_zero_size_is_identity():
    p = pkt(0, b"abc")
    u = uap(np.full(64, 0.3), PC_P, "advpad", loc=A.START, overhead_pct=1)  # floor(0.23) = 0
    assert np.array_equal(A.apply_advpad(p, u).values, encode(p, PC_P))


def test_advpad_errors():
    m = linear_model(PC_P)
    with pytest.raises(DataError):
        A.gen_advpad([], 0, m)
    with pytest.raises(DataError, match="increase the overhead"):
        A.gen_advpad([pkt(0, b"ab")], 0, m, overhead_pct=1, iterations=1, batch_size=1)
    with pytest.raises(IncompatibleError):
        A.gen_advpad([pkt(0, b"ab")], 0, linear_model(Encoding(Kind.FCC_P, n=2, max_pkt_size=64)))


# ------------------------------------------------------------------ AdvPay

FCC3 = Encoding(Kind.FCC_P, n=3, max_pkt_size=60)
FCC3H = Encoding(Kind.FCC_HP, n=3, max_pkt_size=60)


def fixture_flow():
    return flow_from([-1, 1, -1, 1], payloads=[b"\x01\x02", b"\x03", b"\x04\x05\x06", b"\x07"])


def test_advpay_zero_iterations_zero():
    u = A.gen_advpay([fixture_flow()], 0, linear_model(FCC3), size=4, iterations=0)
    assert not u.values.any() and len(u.values) == 4


def test_advpay_window_layout_payload_only():
    f = fixture_flow()
    xi = np.array([10, 20, 30, 40]) / 255
    row = A.apply_advpay(f, uap(xi, FCC3, "advpay", size=4,
                                dummy_index=A.AFTER_FIRST_FORWARD)).values
    expect = np.zeros((3, 60))
    expect[0, :2] = -np.array([1, 2]) / 255   # first packet, direction -1
    expect[1, :1] = np.array([3]) / 255       # first forward packet
    expect[2, :4] = xi                        # dummy, sign of packet before it (+1)
    assert np.allclose(row.reshape(3, 60), expect, atol=1e-7)


def test_advpay_window_layout_with_header():
    f = fixture_flow()
    xi = np.full(4, 0.5)
    row = A.apply_advpay(f, uap(xi, FCC3H, "advpay", size=4,
                                dummy_index=A.AFTER_FIRST_FORWARD)).values.reshape(3, 60)
    prev = f.packets[1]
    assert np.allclose(row[2, :20], np.frombuffer(prev.tl_header, np.uint8) / 255)
    assert np.allclose(row[2, 20:24], 0.5) and not row[2, 24:].any()
    assert np.array_equal(row[:2].ravel(), encode(f, FCC3H)[:120])


def test_advpay_dummy_sign_follows_previous_packet():
    f = flow_from([1, -1, 1, 1])
    u = uap(np.full(3, 0.2), FCC3, "advpay", size=3, dummy_index=A.AFTER_FIRST_FORWARD)
    row = A.apply_advpay(f, u).values.reshape(3, 60)
    assert np.allclose(row[1, :3], 0.2)            # k = 1, previous direction +1
    u.params["dummy_index"] = 2                     # previous packet is -1
    row = A.apply_advpay(f, u).values.reshape(3, 60)
    assert np.allclose(row[2, :3], -0.2)


def test_advpay_default_policy_slot():
    assert A.resolve_dummy_index(flow_from([-1, -1, 1, -1]), A.AFTER_FIRST_FORWARD) == 3


def test_advpay_zero_payload_splices_blank_slot():
    f = flow_from([1, 1, 1])
    row = A.apply_advpay(f, uap(np.zeros(5), FCC3, "advpay", size=5, dummy_index=1)).values
    clean = encode(f, FCC3).reshape(3, 60)
    assert np.array_equal(row.reshape(3, 60), np.stack([clean[0], np.zeros(60), clean[1]]))


def test_advpay_one_step_matches_hand_gradient():
    m = linear_model(FCC3, seed=1)
    f = fixture_flow()
    eps = 2.0
    u = A.gen_advpay([f], 1, m, size=4, iterations=1, batch_size=1, eps=eps)
    x0 = A.apply_advpay(f, uap(np.zeros(4), FCC3, "advpay", size=4,
                               dummy_index=A.AFTER_FIRST_FORWARD)).values
    g = hand_grad(m, x0, 1)[120:124]  # dummy slot, sign +1
    assert np.allclose(u.values, np.clip(eps * g, 0, 1), atol=1e-6)


def test_advpay_errors():
    m = linear_model(FCC3)
    with pytest.raises(DataError, match="outside"):
        A.gen_advpay([fixture_flow()], 0, m, size=4, dummy_index=3, iterations=0)
    with pytest.raises(DataError, match="shorter"):
        A.gen_advpay([flow_from([1])], 0, linear_model(Encoding(Kind.FCC_P, n=5, max_pkt_size=60)),
                     size=4, dummy_index=3, iterations=0)
    with pytest.raises(DataError):
        A.gen_advpay([fixture_flow()], 0, m, size=61, iterations=0)


# ---------------------------------------------------------------- AdvBurst

PS8 = Encoding(Kind.FTSC_PS, m=8, max_pkt_size=256)
IAT8 = Encoding(Kind.FTSC_IAT, m=8, max_pkt_size=256)


def burst_flow():
    return flow_from([1, -1, -1, 1], payloads=[b"a" * 30, b"b" * 60, b"c" * 90, b"d" * 10],
                     iats=[1000, 2000, 3000])


def test_advburst_ps_layout_d2():
    f = burst_flow()
    xi = np.array([0.25, -0.5])
    row = A.apply_advburst(f, uap(xi, PS8, "advburst", dummy_count=2,
                                  selected_burst=A.FIRST_BACKWARD, feature="PS")).values
    s = normalize_ps([50, 80, 110, 30], STATS)
    expect = [s[0], -s[1], -s[2], -xi[0], -xi[1], s[3], 0, 0]
    assert np.allclose(row, expect, atol=1e-6)


def test_advburst_iat_junction_slot():
    f = burst_flow()
    xi = np.array([0.7, 0.9])
    row = A.apply_advburst(f, uap(xi, IAT8, "advburst", dummy_count=2,
                                  selected_burst=A.FIRST_BACKWARD, feature="IAT")).values
    a = normalize_iat([1000, 2000, 3000], STATS)
    # gaps: p0-p1 (-), p1-p2 (-), p2-dummy0 (-), dummy0-dummy1 (-), dummy1-p3 (+)
    expect = [-a[0], -a[1], -xi[0], -xi[1], a[2], 0, 0]
    assert np.allclose(row, expect, atol=1e-6)


def test_advburst_zero_dummies_identity():
    f = burst_flow()
    u = uap(np.zeros(0), PS8, "advburst", dummy_count=0, selected_burst=A.FIRST_FORWARD,
            feature="PS")
    assert np.array_equal(A.apply_advburst(f, u).values, encode(f, PS8, STATS))


def test_default_burst_policies():
    assert A.default_burst_policy(PS8) == A.FIRST_FORWARD
    assert A.default_burst_policy(IAT8) == A.FIRST_BACKWARD


def test_advburst_truncates_at_window():
    f = flow_from([1] * 7 + [-1])
    u = uap(np.full(4, 0.1), PS8, "advburst", dummy_count=4, selected_burst=A.FIRST_FORWARD,
            feature="PS")
    row = A.apply_advburst(f, u, stats=STATS).values
    assert len(row) == 8 and np.allclose(row[7], 0.1)


def test_advburst_domains_and_skips():
    m = linear_model(IAT8, stats=STATS)
    flows = [burst_flow(), flow_from([1, 1, 1])]  # the second has no backward burst
    u = A.gen_advburst(flows, 0, m, dummy_count=6, iterations=20, batch_size=2, eps=50.0)
    assert u.gen_params["skipped"] == 1
    us = decode_iat(u.values, STATS)
    assert us.min() >= 1_000 and us.max() <= 100_000
    m = linear_model(PS8, stats=STATS)
    u = A.gen_advburst([burst_flow()], 0, m, dummy_count=6, iterations=20, batch_size=1, eps=50.0)
    sizes = decode_ps(u.values, STATS)
    assert sizes.min() >= 40 - 1e-6 and sizes.max() <= 256 + 1e-6
    with pytest.raises(DataError, match="no flow"):
        A.gen_advburst([flow_from([1, 1])], 0, linear_model(IAT8, stats=STATS), iterations=0)


def test_advburst_zero_iterations_seeded_random_in_domain():
    m = linear_model(PS8, stats=STATS)
    a = A.gen_advburst([burst_flow()], 0, m, dummy_count=5, iterations=0, seed=3)
    b = A.gen_advburst([burst_flow()], 0, m, dummy_count=5, iterations=0, seed=3)
    assert np.array_equal(a.values, b.values)
    assert A.clip_domain("advburst", PS8, STATS).contains(a.values)


def test_materialized_burst_matches_encoding():
    f = burst_flow()
    u = uap(normalize_iat([5_000, 20_000], STATS), IAT8, "advburst", dummy_count=2,
            selected_burst=A.FIRST_BACKWARD, feature="IAT")
    g = A.materialize_advburst(f, u)
    assert g.iats_us() == [1000, 2000, 5000, 20000, 3000]
    assert np.allclose(encode(g, IAT8, STATS), A.apply_advburst(f, u).values, atol=1e-6)


# ------------------------------------------------------------- port attack

def test_port_attack_needs_header():
    with pytest.raises(IncompatibleError):
        A.port_attack(pkt(0, b"x"), Kind.PC_P)


def test_port_attack_packet_and_vector(rng):
    p = pkt(0, b"payload")
    q = A.port_attack(p, Kind.PC_HP, (2000, 2010), seed=1)
    assert 2000 <= q.tuple.src_port <= 2010 and 2000 <= q.tuple.dst_port <= 2010
    assert q.tl_header[:2] == q.tuple.src_port.to_bytes(2, "big")
    assert q.tl_header[4:] == p.tl_header[4:] and q.payload == p.payload
    v = encode(p, PC_HP)
    w = A.port_attack(v, Kind.PC_HP, seed=1)
    assert np.array_equal(v[4:], w[4:])
    ports = np.rint(w[:4] * 255).astype(int)
    assert 1024 <= ports[0] * 256 + ports[1] <= 65535


def test_port_attack_flow_same_pair():
    f = flow_from([1, -1, 1, -1])
    g = A.port_attack(f, Kind.FCC_HP, seed=5)
    fwd = {(p.tuple.src_port, p.tuple.dst_port) for p in g.packets if p.direction == 1}
    bwd = {(p.tuple.dst_port, p.tuple.src_port) for p in g.packets if p.direction == -1}
    assert len(fwd) == 1 and fwd == bwd
    for a, b in zip(f.packets, g.packets):
        assert a.tl_header[4:] == b.tl_header[4:] and a.payload == b.payload


def test_port_attack_fcc_vector_matches_flow():
    enc = Encoding(Kind.FCC_HP, n=5, max_pkt_size=60)
    f = flow_from([1, -1, 1])
    v = A.port_attack(encode(f, enc), Kind.FCC_HP, seed=8, max_pkt_size=60)
    assert np.array_equal(v, encode(A.port_attack(f, Kind.FCC_HP, seed=8), enc))


# ------------------------------------------------------------------- clip

def test_clip_examples():
    d = A.ClipDomain(0.0, 1.0)
    assert A.clip(np.array([0.3]), d)[0] == np.float64(0.3)
    assert A.clip(np.array([1.7]), d)[0] == 1.0


def test_clip_signed_domain():
    d = A.ClipDomain(0.5, 2.0, sign=-1)
    assert A.clip(np.array([1.0, -1.0, -3.0]), d).tolist() == [-0.5, -1.0, -2.0]


def test_clip_idempotent(rng):
    for sign in (None, 1, -1):
        d = A.ClipDomain(-0.3, 0.8, sign)
        for _ in range(10_000 // 3):
            v = rng.standard_normal(8) * 3
            once = A.clip(v, d)
            assert np.array_equal(A.clip(once, d), once)


def test_clip_domain_bounds():
    assert A.clip_domain("advpad", PC_P) == A.ClipDomain(0.0, 1.0)
    d = A.clip_domain("randburst", IAT8, STATS)
    assert decode_iat(d.lower, STATS) == 1000 and decode_iat(d.upper, STATS) == 100_000


# -------------------------------------------------------------- baselines

def test_rand_baseline_reproducible():
    a = A.rand_baseline("randpad", PC_P, 0, {"loc": A.START, "overhead_pct": 10}, runs=50, seed=9)
    b = A.rand_baseline("randpad", PC_P, 0, {"loc": A.START, "overhead_pct": 10}, runs=50, seed=9)
    assert len(a) == 50
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not np.array_equal(a[0].values, a[1].values)


def test_randburst_iat_draws_in_range():
    runs = A.rand_baseline("randburst", IAT8, 0, {"dummy_count": 7}, runs=50, seed=2, stats=STATS)
    us = np.concatenate([decode_iat(r.values, STATS) for r in runs])
    assert us.min() >= 1_000 and us.max() <= 100_000


def test_rand_baseline_errors():
    with pytest.raises(DataError):
        A.rand_baseline("randpad", PC_P, 0, {}, runs=0)
    with pytest.raises(IncompatibleError):
        A.rand_baseline("randpay", PC_P, 0, {"size": 4})


# -------------------------------------------------------------- properties

def full_set_loss(model, parts, xi):
    return A.Splice.stack(parts, model.spec.input_length).loss_and_grad(model, xi, 0)[0]


@pytest.mark.parametrize("attack", ["advpad", "advpay", "advburst"])
def test_one_iteration_does_not_decrease_loss(attack, small_flows):
    flows = [f for f in small_flows if f.label == 0][:16]
    if attack == "advpad":
        enc = Encoding(Kind.PC_HP, max_pkt_size=256)
        items = [payload_packets(f)[0] for f in flows]
        gen = lambda t: A.gen_advpad(items, 0, m, A.START, 40, iterations=t, batch_size=16,
                                     eps=1e-3, seed=4)
        parts = lambda xi: [A._pad_part(p, enc, A.START, 40) for p in items]
    elif attack == "advpay":
        enc = Encoding(Kind.FCC_HP, n=4, max_pkt_size=256)
        gen = lambda t: A.gen_advpay(flows, 0, m, 64, iterations=t, batch_size=16, eps=1e-3,
                                     seed=4)
        parts = lambda xi: [A._pay_part(f, enc, 64, A.AFTER_FIRST_FORWARD) for f in flows]
    else:
        enc = Encoding(Kind.FTSC_PS, m=40, max_pkt_size=256)
        gen = lambda t: A.gen_advburst(flows, 0, m, 5, iterations=t, batch_size=16, eps=1e-3,
                                       seed=4)
        parts = lambda xi: [A._burst_part(f, enc, 5, A.FIRST_FORWARD, STATS) for f in flows]
    m = new_model(cnn_spec(enc.length, 4), 2, encoding=enc, norm_stats=STATS).astype(np.float64)
    xi0, xi1 = gen(0).values, gen(1).values
    assert full_set_loss(m, parts(xi0), xi1) >= full_set_loss(m, parts(xi0), xi0) - 1e-8


def test_domain_holds_after_every_iteration(small_flows):
    enc = Encoding(Kind.FTSC_IAT, m=40, max_pkt_size=256)
    m = new_model(cnn_spec(enc.length, 4), 0, encoding=enc, norm_stats=STATS)
    flows = small_flows[:20]
    dom = A.clip_domain("advburst", enc, STATS)
    for t in range(6):
        u = A.gen_advburst(flows, 1, m, 4, iterations=t, batch_size=8, eps=100.0, seed=1)
        assert dom.contains(u.values)


def test_universal_application_splits(small_flows):
    enc = Encoding(Kind.FCC_P, n=4, max_pkt_size=256)
    u = uap(np.linspace(0, 1, 32), enc, "advpay", size=32, dummy_index=A.AFTER_FIRST_FORWARD)
    flows = [f for f in small_flows if any(p.direction == 1 for p in f.packets)][:30]
    whole, _ = A.apply_many(flows, u)
    halves = np.concatenate([A.apply_many(flows[:13], u)[0], A.apply_many(flows[13:], u)[0]])
    assert np.array_equal(whole, halves)


def test_uap_file_round_trip(tmp_path):
    u = A.Uap(np.array([0.1, -0.25, 3.5], np.float32), 2, IAT8, "advburst",
              {"dummy_count": 3, "selected_burst": A.FIRST_BACKWARD, "feature": "IAT"},
              {"iterations": 5, "seed": 1}, "abc123", STATS)
    A.save_uap(u, tmp_path / "u.antu")
    back = A.load_uap(tmp_path / "u.antu")
    assert np.array_equal(back.values, u.values) and back.metadata() == u.metadata()
    raw = (tmp_path / "u.antu").read_bytes()
    with pytest.raises(DataError, match="checksum"):
        A.uap_from_bytes(raw[:-6] + raw[-5:])
    with pytest.raises(DataError, match="magic"):
        A.uap_from_bytes(b"ANTM" + raw[4:])


def test_materialized_pad_quantizes():
    p = pkt(0, b"xy" * 10, tup(proto=UDP))
    u = uap(np.array([0.0, 0.5, 1.2] + [0.3] * 61), PC_P, "advpad", loc=A.END, overhead_pct=10)
    q = A.materialize_advpad(p, u)
    assert q.payload == p.payload + bytes([0, 128])  # size 28 -> 2 pad bytes
