import numpy as np
import pytest

from qfkit import kernels
from qfkit.tensor import QuantParams, RequantSpec


def conv_brute_force(x, kernel, bias, stride, padding):
    """Seven-loop reference convolution, independent of the library path."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for cc in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[ni, cc, y * stride + ky, xx * stride + kx]
                                    * kernel[oc, cc, ky, kx]
                                )
                    out[ni, oc, y, xx] = acc + (bias[oc] if bias is not None else 0.0)
    return out


def maxpool_brute_force(x, k, s):
    n, c, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for cc in range(c):
            for y in range(ho):
                for xx in range(wo):
                    out[ni, cc, y, xx] = x[ni, cc, y * s : y * s + k, xx * s : xx * s + k].max()
    return out


rng = np.random.default_rng(12)


class TestF32Kernels:
    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 0, 1), (2, 1, 3), (2, 0, 2)])
    def test_conv_matches_brute_force(self, stride, padding, k):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        kern = rng.standard_normal((4, 3, k, k)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        got = kernels.conv2d_f32(x, kern, bias, stride, padding)
        want = conv_brute_force(x, kern, bias, stride, padding)
        assert np.allclose(got, want, atol=1e-4)

    def test_identity_1x1_conv(self):
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        kern = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        got = kernels.conv2d_f32(x, kern, None, 1, 0)
        assert np.allclose(got, x, atol=1e-6)

    def test_maxpool_matches_brute_force(self):
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        got = kernels.maxpool2d_f32(x, 2, 2)
        assert np.array_equal(got, maxpool_brute_force(x, 2, 2))

    def test_upsample_nearest(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        got = kernels.upsample2x_f32(x)
        want = np.array([[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], np.float32)
        assert np.array_equal(got, want)

    def test_batchnorm_formula(self):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        gamma = np.array([1.0, 2.0, 0.5], np.float32)
        beta = np.array([0.0, 1.0, -1.0], np.float32)
        mean = np.array([0.1, -0.2, 0.0], np.float32)
        var = np.array([1.0, 4.0, 0.25], np.float32)
        got = kernels.batchnorm_f32(x, gamma, beta, mean, var, 0.0)
        for c in range(3):
            want = (x[:, c] - mean[c]) / np.sqrt(var[c]) * gamma[c] + beta[c]
            assert np.allclose(got[:, c], want, atol=1e-5)

    def test_global_avg_pool(self):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        got = kernels.global_avg_pool_f32(x)
        assert got.shape == (2, 3, 1, 1)
        assert np.allclose(got[:, :, 0, 0], x.mean(axis=(2, 3)), atol=1e-6)

    def test_sigma_softmax_basics(self):
        assert np.allclose(kernels.sigmoid_f32(np.zeros((2, 2), np.float32)), 0.5)
        big = kernels.sigmoid_f32(np.array([[100.0], [-100.0]], np.float32))
        assert np.allclose(big, [[1.0], [0.0]], atol=1e-6)
        x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32) * 10
        p = kernels.softmax_channels_f32(x)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_dense(self):
        x = rng.standard_normal((2, 4, 1, 1)).astype(np.float32)
        w = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = kernels.dense_f32(x, w, b)
        want = x.reshape(2, 4) @ w.T + b
        assert np.allclose(got, want, atol=1e-5)


def int8_conv_reference(x_q, zp_in, kernel_q, bias_q, stride, padding, rq, out_qp, relu):
    """Dequantization-free reference: exact integer conv via the brute-force
    float loop (all values are small integers, so float64 is exact), then the
    public fixed-point requantization."""
    acc = conv_brute_force(
        (x_q.astype(np.int32) - zp_in).astype(np.float64),
        kernel_q.astype(np.float64),
        None, stride, padding,
    )
    acc = np.round(acc).astype(np.int32)
    if bias_q is not None:
        acc += bias_q[None, :, None, None]
    from qfkit.tensor import requantize_fixed_point

    q = requantize_fixed_point(acc, rq.multiplier, rq.shift, out_qp.zero_point, None)
    if relu:
        q = np.maximum(q, np.int8(out_qp.zero_point))
    return q


class TestInt8Conv:
    @pytest.mark.parametrize("stride,padding,k,relu", [(1, 1, 3, False), (2, 0, 2, True), (1, 0, 1, False)])
    def test_gemm_route_matches_integer_brute_force(self, stride, padding, k, relu):
        x_q = rng.integers(-128, 128, (2, 5, 9, 9), dtype=np.int8)
        kernel_q = rng.integers(-128, 128, (4, 5, k, k), dtype=np.int8)
        bias_q = rng.integers(-500, 500, 4, dtype=np.int32)
        rq = RequantSpec.from_ratio(0.0123, kernels.conv_acc_bound(kernel_q, bias_q))
        out_qp = QuantParams(0.05, -7)
        acc = kernels.conv2d_int8_acc(x_q, 3, kernel_q, bias_q, stride, padding)
        got = rq.apply(acc, out_qp.zero_point)
        if relu:
            got = np.maximum(got, np.int8(out_qp.zero_point))
        want = int8_conv_reference(x_q, 3, kernel_q, bias_q, stride, padding, rq, out_qp, relu)
        assert np.array_equal(got, want)

    def test_nhwc_gemm_route_matches_nchw(self):
        x_q = rng.integers(-128, 128, (2, 6, 8, 8), dtype=np.int8)
        kernel_q = rng.integers(-128, 128, (5, 6, 3, 3), dtype=np.int8)
        bias_q = rng.integers(-300, 300, 5, dtype=np.int32)
        rq = RequantSpec.from_ratio(0.02, kernels.conv_acc_bound(kernel_q, bias_q))
        out_qp = QuantParams(0.08, 4)
        acc = kernels.conv2d_int8_acc(x_q, -2, kernel_q, bias_q, 1, 1)
        want = rq.apply(acc, out_qp.zero_point)
        got = kernels.conv2d_int8_nhwc_gemm(
            kernels.nchw_to_nhwc(x_q), -2, kernel_q, bias_q, 1, 1, rq, out_qp, relu=False
        )
        assert np.array_equal(kernels.nhwc_to_nchw(got), want)

    @pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")
    def test_direct_route_matches_nchw(self):
        for trial in range(6):
            trng = np.random.default_rng(trial)
            c = int(trng.integers(1, 40))
            o = int(trng.integers(1, 16))
            k = int(trng.choice([1, 3]))
            stride = int(trng.choice([1, 2]))
            x_q = trng.integers(-128, 128, (2, c, 10, 10), dtype=np.int8)
            kernel_q = trng.integers(-128, 128, (o, c, k, k), dtype=np.int8)
            bias_q = trng.integers(-400, 400, o, dtype=np.int32)
            zp_in = int(trng.integers(-120, 120))
            rq = RequantSpec.from_ratio(0.004, kernels.conv_acc_bound(kernel_q, bias_q))
            out_qp = QuantParams(0.03, int(trng.integers(-100, 100)))
            relu = bool(trng.integers(2))
            acc = kernels.conv2d_int8_acc(x_q, zp_in, kernel_q, bias_q, stride, k == 3)
            want = rq.apply(acc, out_qp.zero_point)
            if relu:
                want = np.maximum(want, np.int8(out_qp.zero_point))
            got = kernels.conv2d_int8_nhwc_direct(
                kernels.nchw_to_nhwc(x_q), zp_in, kernels.pack_kernel_nhwc_i16(kernel_q),
                bias_q, stride, int(k == 3), rq, out_qp, relu,
            )
            assert np.array_equal(kernels.nhwc_to_nchw(got), want), f"trial {trial}"

    def test_wide_contraction_uses_float64_and_stays_exact(self):
        # 600 channels exceeds the float32-exact contraction limit.
        x_q = np.full((1, 600, 3, 3), 127, dtype=np.int8)
        kernel_q = np.full((1, 600, 1, 1), -128, dtype=np.int8)
        acc = kernels.conv2d_int8_acc(x_q, -128, kernel_q, None, 1, 0)
        assert acc[0, 0, 0, 0] == 600 * 255 * -128


class TestInt8Elementwise:
    def test_relu_shared_qparams_is_max(self):
        qp = QuantParams(0.1, -5)
        q = np.array([-128, -6, -5, 0, 127], np.int8)
        out = kernels.relu_int8(q, qp, qp)
        assert out.tolist() == [-5, -5, -5, 0, 127]

    def test_relu_requant_route(self):
        in_qp = QuantParams(0.1, 0)
        out_qp = QuantParams(0.05, -128)
        rq = RequantSpec.from_ratio(in_qp.scale / out_qp.scale, 255)
        q = np.array([-10, 0, 10], np.int8)
        out = kernels.relu_int8(q, in_qp, out_qp, rq)
        # real values [-1, 0, 1] -> relu -> [0, 0, 1] -> codes at scale 0.05, zp -128
        assert out.tolist() == [-128, -128, -108]

    def test_maxpool_int8_order_preserving(self):
        q = rng.integers(-128, 128, (2, 3, 6, 6), dtype=np.int8)
        got = kernels.maxpool2d_int8(q, 2, 2)
        assert np.array_equal(got, maxpool_brute_force(q, 2, 2))

    def test_concat_requantizes_into_shared_range(self):
        a_qp = QuantParams(0.1, 0)
        b_qp = QuantParams(0.2, 0)
        out_qp = QuantParams(0.2, 0)
        a = np.full((1, 1, 2, 2), 20, np.int8)  # 2.0
        b = np.full((1, 1, 2, 2), 20, np.int8)  # 4.0
        rqs = (
            RequantSpec.from_ratio(a_qp.scale / out_qp.scale, 255),
            RequantSpec.from_ratio(b_qp.scale / out_qp.scale, 255),
        )
        out = kernels.concat_int8([a, b], [a_qp, b_qp], rqs, out_qp)
        assert out.shape == (1, 2, 2, 2)
        assert np.array_equal(out[0, 0], np.full((2, 2), 10))  # 2.0 at scale 0.2
        assert np.array_equal(out[0, 1], np.full((2, 2), 20))  # 4.0 preserved

    def test_gap_int8_known_average(self):
        in_qp = QuantParams(0.5, 0)
        out_qp = QuantParams(0.5, 0)
        q = np.arange(16, dtype=np.int8).reshape(1, 1, 4, 4)
        rq = RequantSpec.from_ratio(in_qp.scale / (out_qp.scale * 16), 16 * 255)
        out = kernels.global_avg_pool_int8(q, in_qp, rq, out_qp)
        # mean of 0..15 = 7.5, fixed point rounds half up -> 8
        assert out.reshape(-1).tolist() == [8]

    def test_nhwc_pool_up_gap_match_nchw(self):
        q = rng.integers(-128, 128, (2, 5, 8, 8), dtype=np.int8)
        qh = kernels.nchw_to_nhwc(q)
        assert np.array_equal(
            kernels.nhwc_to_nchw(kernels.maxpool2d_int8_nhwc(qh, 2, 2)),
            kernels.maxpool2d_int8(q, 2, 2),
        )
        assert np.array_equal(
            kernels.nhwc_to_nchw(kernels.upsample2x_int8_nhwc(qh)),
            kernels.upsample2x_int8(q),
        )
        in_qp, out_qp = QuantParams(0.1, 3), QuantParams(0.05, -2)
        rq = RequantSpec.from_ratio(in_qp.scale / (out_qp.scale * 64), 64 * 255)
        a = kernels.global_avg_pool_int8(q, in_qp, rq, out_qp)
        b = kernels.global_avg_pool_int8_nhwc(qh, in_qp, rq, out_qp)
        assert np.array_equal(a.reshape(2, 5), b.reshape(2, 5))

    def test_sigmoid_softmax_int8_roundtrip_error_small(self):
        in_qp = QuantParams(0.05, 0)
        out_qp = QuantParams(1.0 / 255.0, -128)
        q = rng.integers(-128, 128, (2, 2, 4, 4), dtype=np.int8)
        sm = kernels.softmax_channels_int8(q, in_qp, out_qp)
        probs = (sm.astype(np.float32) - out_qp.zero_point) * out_qp.scale
        x = (q.astype(np.float32) - in_qp.zero_point) * in_qp.scale
        want = kernels.softmax_channels_f32(x)
        assert np.abs(probs - want).max() <= out_qp.scale
