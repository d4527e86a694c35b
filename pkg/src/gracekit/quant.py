"""Group-wise learned-step-size weight quantization.

Weights are flattened row-major and cut into contiguous groups of
``group_size``; the last group is zero-padded when the element count is not a
multiple of the group size. Each group owns a log-scale ``theta`` so the step
``s = exp(theta)`` stays positive under any update.

Rounding is half-to-even (``numpy.rint``).
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ConfigError, FormatError, ShapeError

SCALE_FLOOR = 1e-8
MAGIC = b"GRQ1"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIQI")
HEADER_SIZE = _HEADER.size

_BOUNDS = {4: (8, 7), 8: (128, 127)}

# byte -> (low nibble, high nibble) as signed 4-bit values
_NIBBLE_LUT = np.array([[(b & 0xF) - 16 * ((b & 0xF) >= 8), (b >> 4) - 16 * ((b >> 4) >= 8)]
                        for b in range(256)], dtype=np.int8)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    scale_grad: str = "lsq"  # "lsq" (straight-through) or "exact" (a.e. derivative)
    lsq_grad_scale: bool = False

    def __post_init__(self):
        if self.bits not in _BOUNDS:
            raise ConfigError(f"unsupported bit width {self.bits}; expected 4 or 8")
        if self.group_size <= 0:
            raise ConfigError("group_size must be positive")
        if self.scale_grad not in ("lsq", "exact"):
            raise ConfigError(f"unknown scale_grad mode {self.scale_grad!r}")

    @property
    def q_n(self) -> int:
        return _BOUNDS[self.bits][0]

    @property
    def q_p(self) -> int:
        return _BOUNDS[self.bits][1]


def group_count(n: int, group_size: int) -> int:
    return -(-n // group_size)


def _grouped(w: np.ndarray, groups: int, group_size: int) -> np.ndarray:
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    padded = np.zeros(groups * group_size)
    padded[:flat.size] = flat
    return padded.reshape(groups, group_size)


def _groups_for(w: np.ndarray, theta, cfg: QuantConfig):
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    n = np.asarray(w).size
    if theta.size == 1 and n <= cfg.group_size:
        return theta, 1, max(n, 1)
    groups = group_count(n, cfg.group_size)
    if theta.size != groups:
        raise ShapeError(f"{n} weights in groups of {cfg.group_size} need {groups} scales, got {theta.size}")
    return theta, groups, cfg.group_size


def init_scales(w, cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    """Log-scales from the 99th percentile of |w| per group, divided by q_p.

    The percentile interpolates linearly at rank 0.99 (g - 1) over the group's
    real (unpadded) entries; an all-zero group is floored at ``SCALE_FLOOR``.
    """
    flat = np.abs(np.asarray(w, dtype=np.float64).reshape(-1))
    if flat.size == 0:
        raise ShapeError("cannot initialise scales for an empty tensor")
    g = cfg.group_size
    thetas = []
    for start in range(0, flat.size, g):
        chunk = flat[start:start + g]
        p99 = np.percentile(chunk, 99.0, method="linear")
        thetas.append(math.log(max(SCALE_FLOOR, p99) / cfg.q_p))
    return np.array(thetas)


def quantize_codes(w, theta, cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    """Integer codes clamp(round(w / s), -q_n, q_p), flattened to the true length."""
    w = np.asarray(w, dtype=np.float64)
    theta, groups, size = _groups_for(w, theta, cfg)
    s = np.exp(theta)[:, None]
    codes = np.clip(np.rint(_grouped(w, groups, size) / s), -cfg.q_n, cfg.q_p)
    return codes.reshape(-1)[:w.size].astype(np.int64)


def fake_quantize(w, theta, cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    """Quantize then dequantize; the output has the shape of ``w``."""
    w = np.asarray(w, dtype=np.float64)
    theta, groups, size = _groups_for(w, theta, cfg)
    s = np.exp(theta)[:, None]
    q = s * np.clip(np.rint(_grouped(w, groups, size) / s), -cfg.q_n, cfg.q_p)
    return q.reshape(-1)[:w.size].reshape(w.shape)


def ste_backward(upstream, w, theta, cfg: QuantConfig = QuantConfig()):
    """Gradients of a loss through :func:`fake_quantize`.

    In ``lsq`` mode the weight gradient passes straight through inside the
    clamp range and is zero outside it; the step gradient per entry is
    ``round(v) - v`` inside and the violated bound (``-q_n`` or ``q_p``)
    outside, with ``v = w / s``. In ``exact`` mode rounding is treated as the
    piecewise-constant map it is: zero weight gradient, step gradient equal to
    the clamped code. Both return ``(grad_w, grad_theta)`` with
    ``grad_theta = grad_s * s``.
    """
    w = np.asarray(w, dtype=np.float64)
    theta, groups, size = _groups_for(w, theta, cfg)
    s = np.exp(theta)[:, None]
    g = _grouped(upstream, groups, size)
    v = _grouped(w, groups, size) / s
    if cfg.scale_grad == "exact":
        grad_w = np.zeros_like(w)
        ds = np.clip(np.rint(v), -cfg.q_n, cfg.q_p)
    else:
        inside = (v >= -cfg.q_n) & (v <= cfg.q_p)
        grad_w = (g * inside).reshape(-1)[:w.size].reshape(w.shape)
        ds = np.where(inside, np.rint(v) - v, np.where(v < -cfg.q_n, -cfg.q_n, cfg.q_p))
    grad_s = np.sum(g * ds, axis=1)
    if cfg.lsq_grad_scale:
        counts = np.full(groups, size, dtype=np.float64)
        counts[-1] = w.size - size * (groups - 1)
        grad_s = grad_s / np.sqrt(counts * cfg.q_p)
    grad_theta = grad_s * s[:, 0]
    return grad_w, grad_theta.reshape(np.shape(theta))


def straight_through_surrogate(w, theta, anchor_w, anchor_theta, cfg: QuantConfig = QuantConfig()):
    """The smooth function whose true gradient the ``lsq`` estimator reports.

    The rounding residual ``round(v0) - v0`` is frozen at the anchor point, so
    inside the clamp range the output is ``s * (w / s + r0)`` and outside it is
    ``s * bound``. At the anchor it equals :func:`fake_quantize`, and its
    derivatives there are exactly what :func:`ste_backward` returns, which
    makes it the finite-difference oracle for the straight-through gradients.
    """
    w = np.asarray(w, dtype=np.float64)
    theta, groups, size = _groups_for(w, theta, cfg)
    a_theta, _, _ = _groups_for(np.asarray(anchor_w, dtype=np.float64), anchor_theta, cfg)
    s = np.exp(theta)[:, None]
    v0 = _grouped(np.asarray(anchor_w, dtype=np.float64), groups, size) / np.exp(a_theta)[:, None]
    r0 = np.rint(v0) - v0
    v = _grouped(w, groups, size) / s
    q = s * np.where(v < -cfg.q_n, -cfg.q_n, np.where(v > cfg.q_p, cfg.q_p, v + r0))
    return q.reshape(-1)[:w.size].reshape(w.shape)


def fake_quantize_op(w, theta, cfg: QuantConfig = QuantConfig()):
    """Tape-aware :func:`fake_quantize` whose backward is :func:`ste_backward`."""
    wv, tv = nk.value_of(w), nk.value_of(theta)
    out = fake_quantize(wv, tv, cfg)
    tape = nk._tape_of(w, theta)
    if tape is None:
        return out

    def vjp(g):
        gw, gt = ste_backward(g, wv, tv, cfg)
        return gw, gt.reshape(tv.shape)

    return tape.record(out, (w, theta), vjp)


def quantized_linear(x, weight, theta, cfg: QuantConfig = QuantConfig()):
    """x @ dequant(W)^T with W of shape (d_out, d_in)."""
    wv = nk.value_of(weight)
    if nk.value_of(x).shape[-1] != wv.shape[-1]:
        raise ShapeError(f"input width {nk.value_of(x).shape[-1]} != weight d_in {wv.shape[-1]}")
    return x @ nk.transpose(fake_quantize_op(weight, theta, cfg))


@dataclass
class QuantizedTensor:
    """A (d_out, d_in) weight matrix with one log-scale per group."""

    weights: np.ndarray
    theta: np.ndarray
    cfg: QuantConfig = QuantConfig()

    def __post_init__(self):
        self.weights = nk.as_matrix(self.weights)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        expected = group_count(self.weights.size, self.cfg.group_size)
        if self.theta.size != expected:
            raise ShapeError(f"expected {expected} scales, got {self.theta.size}")

    @classmethod
    def from_weights(cls, weights, cfg: QuantConfig = QuantConfig()) -> "QuantizedTensor":
        return cls(weights, init_scales(weights, cfg), cfg)

    @property
    def shape(self):
        return self.weights.shape

    @property
    def group_count(self) -> int:
        return self.theta.size

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.theta)

    def codes(self) -> np.ndarray:
        return quantize_codes(self.weights, self.theta, self.cfg)

    def dequantized(self) -> np.ndarray:
        return fake_quantize(self.weights, self.theta, self.cfg)

    def linear(self, x):
        return quantized_linear(x, self.weights, self.theta, self.cfg)


# -- packed storage ------------------------------------------------------------------

@dataclass(frozen=True)
class PackedBlob:
    """Immutable packed checkpoint of one quantized matrix."""

    bits: int
    group_size: int
    d_out: int
    d_in: int
    element_count: int
    scales: np.ndarray
    payload: bytes
    version: int = VERSION

    @property
    def group_count(self) -> int:
        return self.scales.size

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, self.version, self.bits, 0, self.group_size,
                              self.d_out, self.d_in, self.element_count, self.group_count)
        return header + self.scales.astype("<f4").tobytes() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedBlob":
        if len(data) < HEADER_SIZE:
            raise FormatError("blob shorter than its header")
        magic, version, bits, _pad, g, d_out, d_in, count, groups = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if bits not in _BOUNDS:
            raise FormatError(f"unsupported bit width {bits}")
        if g == 0 or count != d_out * d_in or groups != group_count(count, g):
            raise FormatError("inconsistent shape fields")
        payload_len = payload_size(count, bits)
        expected = HEADER_SIZE + 4 * groups + payload_len
        if len(data) != expected:
            raise FormatError(f"blob is {len(data)} bytes, header implies {expected}")
        off = HEADER_SIZE
        scales = np.frombuffer(data, dtype="<f4", count=groups, offset=off).copy()
        payload = bytes(data[off + 4 * groups:])
        return cls(bits, g, d_out, d_in, count, scales, payload, version)


def payload_size(element_count: int, bits: int) -> int:
    return -(-element_count // 2) if bits == 4 else element_count


def packed_size(element_count: int, bits: int, group_size: int) -> int:
    """Exact serialized size: header + 4 bytes per scale + payload."""
    return HEADER_SIZE + 4 * group_count(element_count, group_size) + payload_size(element_count, bits)


def pack_codes(codes, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.int64)
    lo, hi = _BOUNDS[bits]
    if codes.size and (codes.min() < -lo or codes.max() > hi):
        raise ConfigError(f"codes outside [-{lo}, {hi}]")
    if bits == 8:
        return codes.astype(np.int8).tobytes()
    nib = (codes & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(payload: bytes, element_count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits == 8:
        return raw.view(np.int8).astype(np.int64)[:element_count]
    return _NIBBLE_LUT[raw].reshape(-1)[:element_count].astype(np.int64)


def pack(qw: QuantizedTensor, cfg: QuantConfig | None = None) -> PackedBlob:
    cfg = cfg or qw.cfg
    if cfg.bits not in _BOUNDS:
        raise ConfigError(f"unsupported bit width {cfg.bits}")
    d_out, d_in = qw.shape
    codes = quantize_codes(qw.weights, qw.theta, cfg)
    return PackedBlob(cfg.bits, cfg.group_size, d_out, d_in, codes.size,
                      np.exp(qw.theta).astype(np.float32), pack_codes(codes, cfg.bits))


def dequantize_blob(blob: PackedBlob) -> np.ndarray:
    codes = unpack_codes(blob.payload, blob.element_count, blob.bits).astype(np.float64)
    grouped = _grouped(codes, blob.group_count, blob.group_size)
    w = grouped * blob.scales.astype(np.float64)[:, None]
    return w.reshape(-1)[:blob.element_count].reshape(blob.d_out, blob.d_in)


def unpack_matvec(blob: PackedBlob | bytes, x) -> np.ndarray:
    """Matrix-vector product straight from packed storage."""
    if isinstance(blob, (bytes, bytearray)):
        blob = PackedBlob.from_bytes(bytes(blob))
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (blob.d_in,):
        raise ShapeError(f"expected a vector of length {blob.d_in}, got shape {x.shape}")
    return dequantize_blob(blob) @ x


def storage_ratio(element_count: int, bits: int, group_size: int, baseline_bits: int = 16) -> float:
    """Baseline weight bytes over packed payload-plus-scale bytes (header excluded)."""
    baseline = element_count * baseline_bits / 8
    packed = payload_size(element_count, bits) + 4 * group_count(element_count, group_size)
    return baseline / packed


def bench(bits: int = 4, group_size: int = 128, rows: int = 256, cols: int = 256,
          iters: int = 20, seed: int = 0) -> list[dict]:
    """Storage and matvec comparison of 16-bit dense, fake-quant and packed weights.

    ``max_abs_err`` for the quantized rows is measured against the float64
    fake-quantised product; for the 16-bit row against the unquantised one.
    With ``iters == 0`` no timing is taken and ``ns_per_matvec`` is NaN.
    """
    rng = np.random.default_rng(seed)
    cfg = QuantConfig(bits=bits, group_size=group_size)
    w = rng.normal(scale=0.05, size=(rows, cols))
    x = rng.normal(size=cols)
    qw = QuantizedTensor.from_weights(w, cfg)
    blob = pack(qw, cfg)
    w16 = w.astype(np.float16)
    w_fq = qw.dequantized()

    ref_fp = w @ x
    ref_q = w_fq @ x
    n = w.size

    def timed(fn):
        if iters <= 0:
            return float("nan")
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
        return float(np.median(samples))

    dense = lambda: w16.astype(np.float64) @ x  # noqa: E731
    fq = lambda: fake_quantize(w, qw.theta, cfg) @ x  # noqa: E731
    packed = lambda: unpack_matvec(blob, x)  # noqa: E731
    return [
        {"impl": "dense16", "bytes": 2 * n, "ns_per_matvec": timed(dense),
         "max_abs_err": float(np.max(np.abs(dense() - ref_fp)))},
        {"impl": "fake_quant", "bytes": 8 * n + 8 * qw.group_count, "ns_per_matvec": timed(fq),
         "max_abs_err": float(np.max(np.abs(fq() - ref_q)))},
        {"impl": f"packed_int{bits}", "bytes": len(blob.payload) + 4 * blob.group_count,
         "ns_per_matvec": timed(packed), "max_abs_err": float(np.max(np.abs(packed() - ref_q)))},
    ]
