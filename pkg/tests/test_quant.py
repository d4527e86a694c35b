import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gracekit import numkit as nk
from gracekit import quant as q
from gracekit.errors import ConfigError, FormatError, ShapeError

INT4 = q.QuantConfig(bits=4, group_size=128)


def test_config_bounds():
    assert (INT4.q_n, INT4.q_p) == (8, 7)
    assert (q.QuantConfig(bits=8).q_n, q.QuantConfig(bits=8).q_p) == (128, 127)
    with pytest.raises(ConfigError):
        q.QuantConfig(bits=3)
    with pytest.raises(ConfigError):
        q.QuantConfig(scale_grad="magic")


def test_init_scales_examples():
    cfg = q.QuantConfig(group_size=8)
    theta = q.init_scales(np.array([1.0, -1.0] * 4), cfg)
    assert theta[0] == pytest.approx(math.log(1 / 7))
    assert math.exp(q.init_scales(np.zeros(8), cfg)[0]) == pytest.approx(1e-8 / 7)
    sample = np.random.default_rng(0).normal(size=128)
    s = math.exp(q.init_scales(sample, INT4)[0])
    assert abs(s - 2.326 / 7) / (2.326 / 7) < 0.10
    oracle = np.sort(np.abs(sample))
    rank = 0.99 * 127
    lo = int(math.floor(rank))
    expected = oracle[lo] + (rank - lo) * (oracle[lo + 1] - oracle[lo])
    assert s == pytest.approx(expected / 7, rel=1e-12)


def test_fake_quantize_examples():
    theta = math.log(0.5)
    cfg = q.QuantConfig(group_size=3)
    np.testing.assert_allclose(q.fake_quantize(np.array([0.26, -1.1, 3.9]), theta, cfg), [0.5, -1.0, 3.5])
    on_grid = np.array([0.5, -1.5, 2.0])
    np.testing.assert_array_equal(q.fake_quantize(on_grid, theta, cfg), on_grid)
    assert q.fake_quantize(np.array([0.25]), theta, q.QuantConfig(group_size=1))[0] == 0.0
    assert q.fake_quantize(np.array([0.75]), theta, q.QuantConfig(group_size=1))[0] == 1.0


@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8]), st.integers(1, 300), st.sampled_from([8, 32, 128]))
def test_fake_quantize_error_and_idempotence(seed, bits, n, g):
    r = np.random.default_rng(seed)
    cfg = q.QuantConfig(bits=bits, group_size=g)
    w = r.normal(size=n)
    theta = q.init_scales(w, cfg)
    fq = q.fake_quantize(w, theta, cfg)
    np.testing.assert_array_equal(q.fake_quantize(fq, theta, cfg), fq)
    s = np.repeat(np.exp(theta), g)[:n]
    inside = (w / s >= -cfg.q_n) & (w / s <= cfg.q_p)
    assert np.all(np.abs(fq - w)[inside] <= s[inside] / 2 + 1e-12)


def test_ste_backward_examples():
    cfg = q.QuantConfig(group_size=4)
    s = 0.25
    w = s * np.array([1.0, -2.0, 3.0, 0.0])
    up = np.array([0.3, -1.0, 2.0, 0.5])
    gw, gt = q.ste_backward(up, w, math.log(s), cfg)
    np.testing.assert_array_equal(gw, up)
    assert gt == pytest.approx(0.0, abs=1e-15)
    gw, gt = q.ste_backward(np.array([1.0]), np.array([10.0]), math.log(0.5), q.QuantConfig(group_size=1))
    assert gw[0] == 0.0
    assert gt == pytest.approx(7 * 0.5)


def _away_from_boundaries(r, n, s, qp):
    k = r.integers(-qp + 1, qp, size=n)
    return s * (k + r.uniform(-0.4, 0.4, size=n))


def test_lsq_gradient_matches_straight_through_surrogate(rng):
    cfg = q.QuantConfig(group_size=16)
    w0 = rng.normal(size=48)
    th0 = q.init_scales(w0, cfg) - 0.2  # some entries clamp
    up = rng.normal(size=48)
    gw, gt = q.ste_backward(up, w0, th0, cfg)

    def f(p):
        return float(up @ q.straight_through_surrogate(p[:48], p[48:], w0, th0, cfg))

    assert nk.finite_diff_check(f, np.concatenate([w0, th0]), analytic=np.concatenate([gw, gt])) < 1e-6
    np.testing.assert_array_equal(q.straight_through_surrogate(w0, th0, w0, th0, cfg), q.fake_quantize(w0, th0, cfg))


def test_exact_gradient_matches_literal_forward(rng):
    cfg = q.QuantConfig(group_size=32, scale_grad="exact")
    s = 0.05
    w = _away_from_boundaries(rng, 64, s, cfg.q_p)
    theta = np.full(2, math.log(s))
    up = rng.normal(size=64)
    _, gt = q.ste_backward(up, w, theta, cfg)
    err = nk.finite_diff_check(lambda t: float(up @ q.fake_quantize(w, t, cfg)), theta, h=1e-6, analytic=gt)
    assert err < 1e-3


def test_quantized_linear_examples(rng):
    x = rng.normal(size=(5, 128))
    w = rng.uniform(-1, 1, size=(16, 128))
    cfg = q.QuantConfig(bits=8, group_size=128)
    np.testing.assert_array_equal(q.quantized_linear(x, w, np.full(16, 50.0), cfg), 0.0)
    ref = x @ w.T
    out = q.quantized_linear(x, w, q.init_scales(w, cfg), cfg)
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 0.01
    # heavy tails: the 99th-percentile init clips outliers, and clipping, not rounding, dominates
    g = rng.normal(size=(16, 128))
    clipped = q.quantized_linear(x, g, q.init_scales(g, cfg), cfg)
    full_range = q.quantized_linear(x, g, np.log(np.abs(g).max(axis=1) / cfg.q_p), cfg)
    ref_g = x @ g.T
    assert np.linalg.norm(full_range - ref_g) / np.linalg.norm(ref_g) < 0.01
    assert np.linalg.norm(clipped - ref_g) > np.linalg.norm(full_range - ref_g)
    eye = np.eye(4)
    np.testing.assert_array_equal(q.quantized_linear(x[:, :4], eye, np.zeros(1), q.QuantConfig(group_size=16)),
                                  x[:, :4])
    with pytest.raises(ShapeError):
        q.quantized_linear(x, np.ones((3, 5)), np.zeros(1), cfg)


def test_quantized_linear_tape_gradient(rng):
    cfg = q.QuantConfig(group_size=8, scale_grad="exact")
    x = rng.normal(size=(4, 8))
    s = 0.1
    w = _away_from_boundaries(rng, 16, s, cfg.q_p).reshape(2, 8)
    theta = np.full(2, math.log(s))
    f = lambda t: nk.sum(nk.tanh(q.quantized_linear(x, w, t, cfg)))  # noqa: E731
    assert nk.finite_diff_check(f, theta, h=1e-6) < 1e-3


def test_pack_examples():
    assert q.pack_codes(np.array([-8, 7]), 4) == bytes([0x78])
    assert q.pack_codes(np.zeros(6, dtype=int), 4) == bytes(3)
    assert q.pack_codes(np.array([3]), 4) == bytes([0x03])
    assert q.unpack_codes(bytes([0x78]), 2, 4).tolist() == [-8, 7]
    with pytest.raises(ConfigError):
        q.pack_codes(np.array([9]), 4)


@pytest.mark.parametrize("bits", [4, 8])
def test_blob_round_trip(rng, bits):
    cfg = q.QuantConfig(bits=bits, group_size=32)
    qw = q.QuantizedTensor.from_weights(rng.normal(size=(5, 13)), cfg)
    blob = q.pack(qw)
    data = blob.to_bytes()
    assert len(data) == q.packed_size(65, bits, 32)
    again = q.PackedBlob.from_bytes(data)
    assert again.to_bytes() == data
    np.testing.assert_array_equal(q.unpack_codes(again.payload, 65, bits), qw.codes())


def test_packed_size_law():
    assert q.payload_size(256, 4) == 128
    assert q.payload_size(255, 4) == 128
    assert q.payload_size(255, 8) == 255
    assert q.packed_size(256, 4, 128) == q.HEADER_SIZE + 4 * 2 + 128
    assert q.HEADER_SIZE == 32
    assert q.storage_ratio(128 * 64, 4, 128) == pytest.approx(256 / 68)


def test_unpack_matvec_examples(rng):
    cfg = q.QuantConfig(group_size=128)
    qw = q.QuantizedTensor.from_weights(rng.normal(size=(1, 128)), cfg)
    blob = q.pack(qw)
    x = rng.normal(size=128)
    np.testing.assert_allclose(q.unpack_matvec(blob, x), q.dequantize_blob(blob) @ x, atol=1e-12)
    np.testing.assert_allclose(q.unpack_matvec(blob.to_bytes(), x), qw.dequantized() @ x, atol=1e-6)
    zero = q.PackedBlob(4, 128, 2, 64, 128, np.ones(1, dtype=np.float32), bytes(64))
    np.testing.assert_array_equal(q.unpack_matvec(zero, x[:64]), np.zeros(2))
    with pytest.raises(ShapeError):
        q.unpack_matvec(blob, x[:5])


def test_corrupt_blobs_are_rejected(rng):
    data = q.pack(q.QuantizedTensor.from_weights(rng.normal(size=(2, 8)), q.QuantConfig(group_size=8))).to_bytes()
    for bad in (b"XRQ1" + data[4:], data[:-1], data[:10], data[:4] + b"\x09\x00" + data[6:]):
        with pytest.raises(FormatError):
            q.unpack_matvec(bad, np.ones(8))


def test_bench_rows_are_deterministic():
    a = q.bench(4, 128, 32, 64, iters=0)
    b = q.bench(4, 128, 32, 64, iters=0)
    assert [r["impl"] for r in a] == ["dense16", "fake_quant", "packed_int4"]
    assert all(math.isnan(r["ns_per_matvec"]) for r in a)
    assert [(r["bytes"], r["max_abs_err"]) for r in a] == [(r["bytes"], r["max_abs_err"]) for r in b]
    assert a[2]["bytes"] < a[0]["bytes"]
