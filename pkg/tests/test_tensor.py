import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfkit.errors import QuantizationError, ShapeError
from qfkit.tensor import (
    QuantParams,
    RequantSpec,
    Shape,
    TensorF32,
    TensorI8,
    dequantize,
    quantize,
    quantize_multiplier,
    requantize,
    requantize_fixed_point,
    round_half_away,
)


def f32(values, shape=None):
    arr = np.asarray(values, dtype=np.float32)
    if shape:
        arr = arr.reshape(shape)
    return TensorF32.from_array(arr)


def quantize_oracle(values, scale, zp):
    """Independent per-element reference: pure-python round half away from zero."""
    out = []
    for v in values:
        t = v / scale
        r = math.floor(abs(t) + 0.5)
        r = r if t >= 0 else -r
        out.append(int(min(max(r + zp, -128), 127)))
    return out


class TestShape:
    def test_volume(self):
        assert Shape((2, 3, 4, 5)).volume == 120

    def test_rank_bounds(self):
        with pytest.raises(ShapeError):
            Shape((1, 2, 3, 4, 5))
        with pytest.raises(ShapeError):
            Shape(())

    def test_positive_dims(self):
        with pytest.raises(ShapeError):
            Shape((1, 0, 3))


class TestQuantParams:
    def test_scale_positive(self):
        with pytest.raises(QuantizationError):
            QuantParams(scale=0.0, zero_point=0)
        with pytest.raises(QuantizationError):
            QuantParams(scale=-1.0, zero_point=0)
        with pytest.raises(QuantizationError):
            QuantParams(scale=float("inf"), zero_point=0)

    def test_zero_point_range(self):
        with pytest.raises(QuantizationError):
            QuantParams(scale=1.0, zero_point=128)
        QuantParams(scale=1.0, zero_point=-128)


class TestQuantize:
    def test_zero_maps_to_zero_point(self):
        q = quantize(f32([0.0]), QuantParams(0.5, 0))
        assert q.data.tolist() == [0]

    def test_unit_value(self):
        # 1.0 / 0.5 = 2 by hand.
        q = quantize(f32([1.0]), QuantParams(0.5, 0))
        assert q.data.tolist() == [2]

    def test_clamp_upper(self):
        q = quantize(f32([1000.0]), QuantParams(0.5, 0))
        assert q.data.tolist() == [127]

    def test_clamp_lower(self):
        q = quantize(f32([-1000.0]), QuantParams(0.5, 0))
        assert q.data.tolist() == [-128]

    def test_round_half_away_from_zero(self):
        q = quantize(f32([1.25, -1.25]), QuantParams(0.5, 0))
        # 2.5 rounds to 3, -2.5 rounds to -3.
        assert q.data.tolist() == [3, -3]

    def test_nonfinite_names_flat_index(self):
        bad = np.array([0.0, 1.0, np.nan, 2.0], dtype=np.float32)
        t = TensorF32(Shape((4,)), bad)
        with pytest.raises(QuantizationError, match="flat index 2"):
            quantize(t, QuantParams(1.0, 0))

    def test_matches_pure_python_oracle(self):
        rng = np.random.default_rng(3)
        values = (rng.standard_normal(500) * 10).astype(np.float32)
        qp = QuantParams(0.0784, -5)
        got = quantize(f32(values), qp).data.tolist()
        assert got == quantize_oracle(values.tolist(), qp.scale, qp.zero_point)


class TestDequantize:
    def test_zero_code(self):
        t = TensorI8.from_array([0], QuantParams(0.5, 0))
        assert dequantize(t).data.tolist() == [0.0]

    def test_inverse_of_quantize_example(self):
        t = TensorI8.from_array([2], QuantParams(0.5, 0))
        assert dequantize(t).data.tolist() == [1.0]

    def test_zero_point_maps_to_zero(self):
        t = TensorI8.from_array([-128], QuantParams(1.0, -128))
        assert dequantize(t).data.tolist() == [0.0]


class TestRequantize:
    def test_derived_ratio(self):
        # 100 * 0.01 = 1 by hand (in_scale * w_scale / out_scale = 0.01).
        out = requantize(np.array([100], np.int32), 0.1, 0.1, QuantParams(1.0, 0))
        assert out.data.tolist() == [1]

    def test_zero_acc_maps_to_zero_point(self):
        out = requantize(np.array([0], np.int32), 0.25, 0.5, QuantParams(0.3, 5))
        assert out.data.tolist() == [5]

    def test_clamp(self):
        out = requantize(np.array([10**6], np.int32), 1.0, 1.0, QuantParams(1.0, 0))
        assert out.data.tolist() == [127]

    def test_rejects_bad_scales(self):
        with pytest.raises(QuantizationError):
            requantize(np.array([1], np.int32), -1.0, 1.0, QuantParams(1.0, 0))


class TestRoundTripProperties:
    @given(
        st.floats(min_value=1e-3, max_value=10.0),
        st.integers(min_value=-128, max_value=127),
        st.lists(st.floats(min_value=-50, max_value=50, width=32), min_size=1, max_size=20),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_bound(self, scale, zp, values):
        qp = QuantParams(scale, zp)
        # Representable window: q = round(x/s) + zp stays in [-127, 127]
        # exactly when |x + s*zp| <= 127 s.
        values = [
            v for v in values if abs(v + scale * zp) <= scale * 127
        ]
        if not values:
            return
        t = f32(values)
        back = dequantize(quantize(t, qp))
        err = np.abs(back.data - t.data)
        assert (err <= scale / 2 + 1e-6).all()

    @given(
        st.floats(min_value=1e-3, max_value=5.0),
        st.integers(min_value=-100, max_value=100),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotonicity(self, scale, zp):
        qp = QuantParams(scale, zp)
        xs = np.sort(np.random.default_rng(0).standard_normal(64).astype(np.float32) * 40)
        q = quantize(f32(xs), qp).data
        assert (np.diff(q.astype(np.int32)) >= 0).all()

    def test_idempotent_after_one_trip(self):
        rng = np.random.default_rng(5)
        qp = QuantParams(0.037, 11)
        q = TensorI8.from_array(rng.integers(-128, 128, 256, dtype=np.int8), qp)
        once = dequantize(q)
        twice = dequantize(quantize(once, qp))
        assert np.array_equal(once.data, twice.data)


class TestFixedPoint:
    def test_multiplier_within_one_ulp(self):
        for ratio in [1.0, 0.5, 0.003217, 0.9999, 123.456, 1e-6]:
            m0, shift = quantize_multiplier(ratio)
            assert (1 << 23) <= m0 < (1 << 24)
            assert abs(m0 * 2.0 ** -shift - ratio) <= 2.0 ** -shift

    def test_rejects_nonpositive(self):
        with pytest.raises(QuantizationError):
            quantize_multiplier(0.0)
        with pytest.raises(QuantizationError):
            quantize_multiplier(float("nan"))

    def test_rejects_oversized(self):
        with pytest.raises(QuantizationError):
            quantize_multiplier(2.0 ** 30)

    def test_fast_and_exact_paths_agree(self):
        rng = np.random.default_rng(9)
        acc = rng.integers(-(2**26), 2**26, 4096, dtype=np.int32)
        for ratio in [0.0017, 0.31, 1.7]:
            m0, shift = quantize_multiplier(ratio)
            fast = requantize_fixed_point(acc, m0, shift, 3, acc_bound=2**26)
            slow = requantize_fixed_point(acc, m0, shift, 3, acc_bound=None)
            assert np.array_equal(fast, slow)

    def test_rounds_half_up(self):
        # ratio is exactly 0.5, so acc = +-3 lands on +-1.5.
        m0, shift = 1 << 23, 24
        out = requantize_fixed_point(np.array([3, -3], np.int32), m0, shift, 0, None)
        assert out.tolist() == [2, -1]  # half up: 1.5 -> 2, -1.5 -> -1

    def test_requant_spec_apply_matches_float_path(self):
        rng = np.random.default_rng(4)
        acc = rng.integers(-(2**20), 2**20, 2048, dtype=np.int32)
        ratio = 0.00314
        out_qp = QuantParams(1.0, -3)
        spec = RequantSpec.from_ratio(ratio, 2**20)
        fx = spec.apply(acc, out_qp.zero_point).astype(np.int32)
        ref = requantize(acc, ratio, 1.0, out_qp).data.astype(np.int32)
        # Fixed point rounds half up, float rounds half away; ties are the
        # only permitted difference.
        assert np.abs(fx - ref).max() <= 1
        assert (fx != ref).mean() < 0.01


def test_tensor_i8_validates_dtype():
    with pytest.raises(QuantizationError):
        TensorI8(Shape((2,)), np.array([1, 2], dtype=np.int16), QuantParams(1.0, 0))


def test_round_half_away_scalar_grid():
    xs = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])
    assert round_half_away(xs).tolist() == [-3, -2, -1, 1, 2, 3]
