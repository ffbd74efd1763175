"""Tensor value types and affine INT8 quantization arithmetic.

Every other module builds on the conversions defined here:

    quantize:    q = clamp(round(x / scale) + zero_point, -128, 127)
    dequantize:  x = scale * (q - zero_point)

Rounding is half away from zero so results are bit-reproducible. The
fixed-point realization used by compiled plans (``quantize_multiplier`` /
``requantize_fixed_point``) rounds half up instead, matching the usual
multiplier-and-shift hardware idiom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError, ShapeError

INT8_MIN = -128
INT8_MAX = 127

# Fixed-point multipliers are normalized to 24 bits: with |acc| <= 2**28 the
# product acc * m0 plus the rounding bias stays below 2**53, so the multiply
# can run exactly in float64 (much faster in numpy than int64) while keeping
# integer semantics. The int64 path is the fallback for anything larger.
MULTIPLIER_BITS = 24
_F64_EXACT = 1 << 53


@dataclass(frozen=True)
class Shape:
    """Tensor geometry in (N, C, H, W) order for images."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.dims) <= 4:
            raise ShapeError(f"rank must be 1..4, got {len(self.dims)}")
        if any(int(d) < 1 for d in self.dims):
            raise ShapeError(f"all dims must be >= 1, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def volume(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)

    def __getitem__(self, i):
        return self.dims[i]


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters for one tensor.

    ``scale`` is real units per quantum; ``zero_point`` is the int8 code
    representing real zero. Weight tensors are symmetric (zero_point 0).
    """

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if not INT8_MIN <= self.zero_point <= INT8_MAX:
            raise QuantizationError(f"zero_point must lie in [-128, 127], got {self.zero_point}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))


@dataclass(frozen=True, eq=False)
class TensorF32:
    """Dense FP32 tensor."""

    shape: Shape
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != self.shape.dims:
            raise ShapeError(f"data shape {arr.shape} does not match {self.shape.dims}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "TensorF32":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(Shape(arr.shape), arr)


@dataclass(frozen=True, eq=False)
class TensorI8:
    """Dense INT8 tensor with its quantization parameters."""

    shape: Shape
    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.dtype != np.int8:
            raise QuantizationError(f"TensorI8 data must be int8, got {arr.dtype}")
        if arr.shape != self.shape.dims:
            raise ShapeError(f"data shape {arr.shape} does not match {self.shape.dims}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr, qparams: QuantParams) -> "TensorI8":
        arr = np.asarray(arr, dtype=np.int8)
        return cls(Shape(arr.shape), arr, qparams)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(x: TensorF32, qp: QuantParams) -> TensorI8:
    """Quantize an FP32 tensor to INT8 codes under ``qp``.

    Raises QuantizationError naming the flat index of the first non-finite
    element, if any.
    """
    data = x.data
    finite = np.isfinite(data)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise QuantizationError(f"non-finite input element at flat index {idx}")
    q = round_half_away(data.astype(np.float64) / qp.scale) + qp.zero_point
    q = np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)
    return TensorI8(x.shape, q, qp)


def dequantize(q: TensorI8) -> TensorF32:
    """Map INT8 codes back to real values: scale * (q - zero_point)."""
    qp = q.qparams
    x = (q.data.astype(np.float64) - qp.zero_point) * qp.scale
    return TensorF32(q.shape, x.astype(np.float32))


def requantize(acc: np.ndarray, in_scale: float, w_scale: float, out_qp: QuantParams) -> TensorI8:
    """Rescale a 32-bit integer accumulator tensor back to INT8.

    The accumulator holds values at scale ``in_scale * w_scale``; the output
    uses ``out_qp``. This is the real-valued reference; compiled plans use
    the fixed-point realization below.
    """
    if in_scale <= 0 or w_scale <= 0:
        raise QuantizationError("accumulator scales must be positive")
    acc = np.asarray(acc)
    if acc.dtype != np.int32:
        acc = acc.astype(np.int32)
    ratio = float(in_scale) * float(w_scale) / out_qp.scale
    q = round_half_away(acc.astype(np.float64) * ratio) + out_qp.zero_point
    q = np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)
    return TensorI8(Shape(acc.shape), q, out_qp)


@dataclass(frozen=True)
class RequantSpec:
    """Fixed-point realization of one requantization ratio.

    ``acc_bound`` is a static bound on the accumulator magnitude, used to
    prove the fast float64 evaluation exact.
    """

    ratio: float
    multiplier: int
    shift: int
    acc_bound: int

    @classmethod
    def from_ratio(cls, ratio: float, acc_bound: int) -> "RequantSpec":
        m0, shift = quantize_multiplier(ratio)
        return cls(ratio=float(ratio), multiplier=m0, shift=shift, acc_bound=int(acc_bound))

    def apply(self, acc: np.ndarray, zero_point: int) -> np.ndarray:
        return requantize_fixed_point(acc, self.multiplier, self.shift, zero_point, self.acc_bound)


def quantize_multiplier(ratio: float) -> tuple[int, int]:
    """Decompose a positive real ratio into (m0, shift) with ratio ~= m0 * 2**-shift.

    m0 is normalized to [2**23, 2**24), so the approximation error is at most
    one unit in the last place of the multiplier (2**-shift).
    """
    if not (math.isfinite(ratio) and ratio > 0.0):
        raise QuantizationError(f"requantization ratio must be positive and finite, got {ratio}")
    mant, exp = math.frexp(ratio)  # ratio = mant * 2**exp, mant in [0.5, 1)
    m0 = round(mant * (1 << MULTIPLIER_BITS))
    shift = MULTIPLIER_BITS - exp
    if m0 == 1 << MULTIPLIER_BITS:
        m0 >>= 1
        shift -= 1
    if shift < 0:
        raise QuantizationError(f"requantization ratio {ratio} too large to realize")
    return int(m0), int(shift)


def requantize_fixed_point(
    acc: np.ndarray,
    m0: int,
    shift: int,
    zero_point: int,
    acc_bound: int | None = None,
) -> np.ndarray:
    """Integer requantization: clamp(((acc * m0 + half) >> shift) + zero_point).

    Rounds half up. ``acc_bound`` is a static bound on |acc|; when the whole
    multiply-add provably fits 53 bits the hot float64 path is taken, which
    computes the identical integers.
    """
    acc = np.asarray(acc)
    half = (1 << (shift - 1)) if shift > 0 else 0
    if (
        acc_bound is not None
        and shift <= 53
        and acc_bound * m0 + half < _F64_EXACT
    ):
        t = acc.astype(np.float64)
        t *= float(m0)
        t += float(half)
        t *= 2.0 ** -shift
        np.floor(t, out=t)
        t += float(zero_point)
        np.clip(t, INT8_MIN, INT8_MAX, out=t)
        return t.astype(np.int8)
    t = acc.astype(np.int64)
    t *= m0
    t += half
    t >>= shift
    t += zero_point
    np.clip(t, INT8_MIN, INT8_MAX, out=t)
    return t.astype(np.int8)
