"""Numpy and numba kernels for FP32 reference and INT8 integer execution.

The FP32 kernels are the plain textbook forms (window im2col + GEMM) and act
as the numerical reference everywhere. The INT8 kernels keep strict integer
semantics: convolutions accumulate exact int32 sums, then requantize through
the shared fixed-point path, so any two executors built on them agree
bit-for-bit.

Two interchangeable INT8 convolution routes exist, both exact:

* GEMM route (NCHW or NHWC): float GEMMs over int16-widened codes. The
  contraction stays exact in float32 while K * 255 * 128 < 2**24 (K up to
  514); wider contractions use float64.
* Direct route (NHWC, numba): an int16 multiply-accumulate loop with the
  requantization and ReLU fused into the kernel. Integer addition is exact
  in any order, so both routes produce identical codes.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    # omp is always shipped with the wheels; the default tbb probe warns on
    # older system TBBs.
    numba.config.THREADING_LAYER = "omp"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

from .graph import (
    Concat,
    Conv2D,
    ConvBiasReLU,
    Dense,
    DenseSigmoid,
    GlobalAvgPool,
    ReLU,
)
from .tensor import (
    INT8_MAX,
    INT8_MIN,
    QuantParams,
    RequantSpec,
    round_half_away,
)

# Largest single int8*int8 product magnitude: (q - zp) in [-255, 255], w in
# [-128, 127].
_MAX_PRODUCT = 255 * 128
_F32_EXACT = 1 << 24


# --------------------------------------------------------------------------
# FP32 reference kernels
# --------------------------------------------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding (kh, kw) windows of x as a strided view (N, C, kh, kw, Ho, Wo)."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_f32(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None,
               stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of (N,C,H,W) with (O,C,kh,kw), zero padding."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(x, kernel.shape[2], kernel.shape[3], stride)
    out = np.tensordot(kernel, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def batchnorm_f32(x, gamma, beta, mean, var, eps):
    inv = gamma / np.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * inv[None, :, None, None] + beta[None, :, None, None]


def relu_f32(x):
    return np.maximum(x, 0.0)


def maxpool2d_f32(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return _windows(x, kernel, kernel, stride).max(axis=(2, 3)).astype(x.dtype, copy=False)


def upsample2x_f32(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, 2, w, 2))
    return out.reshape(n, c, h * 2, w * 2)


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(xs, axis=1)


def global_avg_pool_f32(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True).astype(np.float32)


def dense_f32(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    feats = x.reshape(x.shape[0], -1)
    out = feats @ kernel.T
    if bias is not None:
        out = out + bias[None, :]
    return out.astype(np.float32, copy=False)


def sigmoid_f32(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow.
    out = np.empty_like(x, dtype=np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_channels_f32(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return (ex / ex.sum(axis=1, keepdims=True)).astype(np.float32)


# --------------------------------------------------------------------------
# Requantization parameterization
#
# One place derives every fixed-point multiplier, so the compiler, the
# node-by-node interpreter, and the plan executor all realize exactly the
# same constants for the same graph.
# --------------------------------------------------------------------------

def conv_acc_bound(kernel_q: np.ndarray, bias_q: np.ndarray | None) -> int:
    k = int(np.prod(kernel_q.shape[1:], dtype=np.int64))
    bound = k * _MAX_PRODUCT
    if bias_q is not None and bias_q.size:
        bound += int(np.abs(bias_q.astype(np.int64)).max())
    return bound


def requant_specs_for(kind, w_scale, mid_qp, out_qp, in_qps, in_shapes,
                      qweights) -> tuple[RequantSpec, ...]:
    """Fixed-point requantization constants for one node or instruction."""
    if isinstance(kind, (Conv2D, ConvBiasReLU, Dense, DenseSigmoid)):
        target = mid_qp if isinstance(kind, DenseSigmoid) else out_qp
        ratio = in_qps[0].scale * w_scale / target.scale
        return (RequantSpec.from_ratio(ratio, conv_acc_bound(qweights["kernel"], qweights.get("bias"))),)
    if isinstance(kind, GlobalAvgPool):
        area = int(in_shapes[0][2]) * int(in_shapes[0][3])
        ratio = in_qps[0].scale / (out_qp.scale * area)
        return (RequantSpec.from_ratio(ratio, area * 255),)
    if isinstance(kind, Concat):
        return tuple(
            RequantSpec.from_ratio(qp.scale / out_qp.scale, 255) for qp in in_qps
        )
    if isinstance(kind, ReLU) and in_qps[0] != out_qp:
        return (RequantSpec.from_ratio(in_qps[0].scale / out_qp.scale, 255),)
    return ()


# --------------------------------------------------------------------------
# INT8 kernels
# --------------------------------------------------------------------------

def conv2d_int8_acc(x_q: np.ndarray, zp_in: int, kernel_q: np.ndarray,
                    bias_q: np.ndarray | None, stride: int, padding: int) -> np.ndarray:
    """Exact int32 accumulator of an INT8 convolution.

    One float GEMM per kernel tap, accumulated in int32. Padding the raw
    codes with the zero point is equivalent to padding (q - zp) with zeros,
    which is what happens here.
    """
    n, c, h, w = x_q.shape
    o, _, kh, kw = kernel_q.shape
    x32 = x_q.astype(np.int16)
    x32 -= np.int16(zp_in)
    gemm_dtype = np.float32 if c * _MAX_PRODUCT < _F32_EXACT else np.float64
    xf = x32.astype(gemm_dtype)
    if padding:
        xf = np.pad(xf, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    wf = kernel_q.astype(gemm_dtype)
    acc = np.zeros((n, o, ho, wo), dtype=np.int32)
    for dy in range(kh):
        for dx in range(kw):
            sl = xf[:, :, dy : dy + (ho - 1) * stride + 1 : stride,
                    dx : dx + (wo - 1) * stride + 1 : stride]
            tap = np.tensordot(sl, wf[:, :, dy, dx], axes=([1], [1]))
            acc += tap.transpose(0, 3, 1, 2).astype(np.int32)
    if bias_q is not None:
        acc += bias_q[None, :, None, None]
    return acc


def conv2d_int8(x_q: np.ndarray, zp_in: int, kernel_q: np.ndarray,
                bias_q: np.ndarray | None, stride: int, padding: int,
                rq: RequantSpec, out_qp: QuantParams, relu: bool = False) -> np.ndarray:
    """INT8 conv -> fixed-point requantization -> optional integer ReLU."""
    acc = conv2d_int8_acc(x_q, zp_in, kernel_q, bias_q, stride, padding)
    q = rq.apply(acc, out_qp.zero_point)
    if relu:
        np.maximum(q, np.int8(out_qp.zero_point), out=q)
    return q


def relu_int8(q: np.ndarray, in_qp: QuantParams, out_qp: QuantParams,
              rq: RequantSpec | None = None) -> np.ndarray:
    """max(x, 0) on codes. With shared qparams this is max(q, zp), exact."""
    if in_qp == out_qp:
        return np.maximum(q, np.int8(in_qp.zero_point))
    acc = q.astype(np.int32)
    acc -= in_qp.zero_point
    np.maximum(acc, 0, out=acc)
    return rq.apply(acc, out_qp.zero_point)


def maxpool2d_int8(q: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # max commutes with dequantization, so qparams pass through unchanged.
    return _windows(q, kernel, kernel, stride).max(axis=(2, 3))


def upsample2x_int8(q: np.ndarray) -> np.ndarray:
    n, c, h, w = q.shape
    out = np.broadcast_to(q[:, :, :, None, :, None], (n, c, h, 2, w, 2))
    return np.ascontiguousarray(out.reshape(n, c, h * 2, w * 2))


def concat_int8(qs: list[np.ndarray], in_qps: list[QuantParams],
                rqs: tuple[RequantSpec, ...], out_qp: QuantParams) -> np.ndarray:
    parts = []
    for q, qp, rq in zip(qs, in_qps, rqs):
        if qp == out_qp:
            parts.append(q)
            continue
        acc = q.astype(np.int32)
        acc -= qp.zero_point
        parts.append(rq.apply(acc, out_qp.zero_point))
    return np.concatenate(parts, axis=1)


def global_avg_pool_int8(q: np.ndarray, in_qp: QuantParams, rq: RequantSpec,
                         out_qp: QuantParams) -> np.ndarray:
    n, c, h, w = q.shape
    acc = (q.astype(np.int32) - in_qp.zero_point).sum(axis=(2, 3), dtype=np.int32)
    return rq.apply(acc, out_qp.zero_point).reshape(n, c, 1, 1)


def dense_int8_acc(q: np.ndarray, zp_in: int, kernel_q: np.ndarray,
                   bias_q: np.ndarray | None) -> np.ndarray:
    feats = q.reshape(q.shape[0], -1).astype(np.int32) - zp_in
    c = feats.shape[1]
    gemm_dtype = np.float32 if c * _MAX_PRODUCT < _F32_EXACT else np.float64
    acc = (feats.astype(gemm_dtype) @ kernel_q.astype(gemm_dtype).T).astype(np.int32)
    if bias_q is not None:
        acc += bias_q[None, :]
    return acc


def dense_int8(q: np.ndarray, zp_in: int, kernel_q: np.ndarray,
               bias_q: np.ndarray | None, rq: RequantSpec, out_qp: QuantParams) -> np.ndarray:
    acc = dense_int8_acc(q, zp_in, kernel_q, bias_q)
    return rq.apply(acc, out_qp.zero_point)


def _quantize_codes(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = round_half_away(x.astype(np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def sigmoid_int8(q: np.ndarray, in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    # Dequantize, apply in float, requantize: deterministic, shared by every
    # executor, so the float detour cannot cause divergence.
    x = (q.astype(np.float64) - in_qp.zero_point) * in_qp.scale
    return _quantize_codes(sigmoid_f32(x.astype(np.float32)), out_qp)


def softmax_channels_int8(q: np.ndarray, in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    x = (q.astype(np.float64) - in_qp.zero_point) * in_qp.scale
    return _quantize_codes(softmax_channels_f32(x.astype(np.float32)), out_qp)


# --------------------------------------------------------------------------
# NHWC kernels for the compiled-plan executor
#
# Plans keep activations channel-last: the direct convolution then reduces
# over a contiguous int16 span, which LLVM turns into wide integer
# multiply-accumulate. Layout never changes values; everything below is
# bit-compatible with the NCHW kernels above.
# --------------------------------------------------------------------------

def nchw_to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def nhwc_to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def pack_kernel_nhwc_i16(kernel_q: np.ndarray) -> np.ndarray:
    """(O, C, kh, kw) int8 weights -> contiguous (O, kh, kw, C) int16."""
    return np.ascontiguousarray(kernel_q.transpose(0, 2, 3, 1).astype(np.int16))


# Direct-kernel selection, calibrated on this substrate: the int16 loop needs
# a channel count worth vectorizing, and wins once the GEMM route would
# either thrash cache with its materialized window matrix or carry a wide
# contraction.
_DIRECT_MIN_CHANNELS = 8
_DIRECT_WIDE_CHANNELS = 48
_DIRECT_IM2COL_BYTES = 32 << 20


def use_direct_conv(n: int, c: int, kh: int, kw: int, ho: int, wo: int) -> bool:
    if not HAVE_NUMBA or c < _DIRECT_MIN_CHANNELS:
        return False
    im2col_bytes = n * c * kh * kw * ho * wo * 4
    return c >= _DIRECT_WIDE_CHANNELS or im2col_bytes >= _DIRECT_IM2COL_BYTES


if HAVE_NUMBA:

    @numba.njit(cache=True, parallel=True)
    def _conv_direct_i16(xp, w, bias, stride, ho, wo, m0, shift, zp_out, relu):
        # xp: (N, Hp, Wp, C) int16, already padded and zero-point-subtracted.
        # w: (O, kh, kw, C) int16. Output int8 with requantization fused.
        n, hp, wp, c = xp.shape
        o, kh, kw, _ = w.shape
        out = np.empty((n, ho, wo, o), dtype=np.int8)
        half = np.int64(1 << (shift - 1)) if shift > 0 else np.int64(0)
        hi = np.int64(INT8_MAX)
        lo = np.int64(zp_out) if relu else np.int64(INT8_MIN)
        for i in numba.prange(n * ho):
            ni = i // ho
            y = i % ho
            accrow = np.empty((wo, o), dtype=np.int32)
            for x in range(wo):
                for oc in range(o):
                    acc = np.int32(0)
                    for ky in range(kh):
                        for kx in range(kw):
                            xrow = xp[ni, y * stride + ky, x * stride + kx]
                            wrow = w[oc, ky, kx]
                            for cc in range(c):
                                acc += np.int32(xrow[cc]) * np.int32(wrow[cc])
                    accrow[x, oc] = acc + bias[oc]
            for x in range(wo):
                for oc in range(o):
                    t = (np.int64(accrow[x, oc]) * m0 + half) >> shift
                    t += zp_out
                    if t < lo:
                        t = lo
                    if t > hi:
                        t = hi
                    out[ni, y, x, oc] = np.int8(t)
        return out


def conv2d_int8_nhwc_direct(x_q: np.ndarray, zp_in: int, packed_kernel: np.ndarray,
                            bias_q: np.ndarray | None, stride: int, padding: int,
                            rq: RequantSpec, out_qp: QuantParams, relu: bool) -> np.ndarray:
    o, kh, kw, c = packed_kernel.shape
    x16 = x_q.astype(np.int16)
    x16 -= np.int16(zp_in)
    if padding:
        x16 = np.pad(x16, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (x_q.shape[1] + 2 * padding - kh) // stride + 1
    wo = (x_q.shape[2] + 2 * padding - kw) // stride + 1
    if bias_q is None:
        bias_q = np.zeros(o, dtype=np.int32)
    return _conv_direct_i16(
        x16, packed_kernel, bias_q, stride, ho, wo,
        np.int64(rq.multiplier), np.int64(rq.shift), np.int64(out_qp.zero_point), relu,
    )


def conv2d_int8_nhwc_gemm(x_q: np.ndarray, zp_in: int, kernel_q: np.ndarray,
                          bias_q: np.ndarray | None, stride: int, padding: int,
                          rq: RequantSpec, out_qp: QuantParams, relu: bool) -> np.ndarray:
    """GEMM route in NHWC: one contraction over (kh, kw, C); exact as above."""
    o, c, kh, kw = kernel_q.shape
    k = c * kh * kw
    gemm_dtype = np.float32 if k * _MAX_PRODUCT < _F32_EXACT else np.float64
    x16 = x_q.astype(np.int16)
    x16 -= np.int16(zp_in)
    xf = x16.astype(gemm_dtype)
    if padding:
        xf = np.pad(xf, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, hp, wp, _ = xf.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sh, sw, sc = xf.strides
    win = np.lib.stride_tricks.as_strided(
        xf,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    wf = kernel_q.transpose(0, 2, 3, 1).astype(gemm_dtype)
    acc = np.tensordot(win, wf, axes=([3, 4, 5], [1, 2, 3])).astype(np.int32)
    if bias_q is not None:
        acc += bias_q[None, None, None, :]
    q = rq.apply(acc, out_qp.zero_point)
    if relu:
        np.maximum(q, np.int8(out_qp.zero_point), out=q)
    return q


def maxpool2d_int8_nhwc(q: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    n, h, w, c = q.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sh, sw, sc = q.strides
    win = np.lib.stride_tricks.as_strided(
        q,
        shape=(n, ho, wo, kernel, kernel, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return win.max(axis=(3, 4))


def upsample2x_int8_nhwc(q: np.ndarray) -> np.ndarray:
    n, h, w, c = q.shape
    out = np.broadcast_to(q[:, :, None, :, None, :], (n, h, 2, w, 2, c))
    return np.ascontiguousarray(out.reshape(n, h * 2, w * 2, c))


def concat_int8_nhwc(qs: list[np.ndarray], in_qps: list[QuantParams],
                     rqs: tuple[RequantSpec, ...], out_qp: QuantParams) -> np.ndarray:
    parts = []
    for q, qp, rq in zip(qs, in_qps, rqs):
        if qp == out_qp:
            parts.append(q)
            continue
        acc = q.astype(np.int32)
        acc -= qp.zero_point
        parts.append(rq.apply(acc, out_qp.zero_point))
    return np.concatenate(parts, axis=3)


def global_avg_pool_int8_nhwc(q: np.ndarray, in_qp: QuantParams, rq: RequantSpec,
                              out_qp: QuantParams) -> np.ndarray:
    n, h, w, c = q.shape
    acc = (q.astype(np.int32) - in_qp.zero_point).sum(axis=(1, 2), dtype=np.int32)
    return rq.apply(acc, out_qp.zero_point).reshape(n, 1, 1, c)
