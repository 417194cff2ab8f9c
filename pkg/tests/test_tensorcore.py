import math

import numpy as np
import pytest

from univseg import tensorcore as tc
from univseg.tensorcore import (
    MaskError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    bce,
    concat1d,
    conv3d,
    finite_diff_check,
    global_avg_pool,
    linear,
    mean_scalars,
    mul,
    pointwise_conv,
    relu,
    reshape,
    scale,
    sigmoid,
    slice1d,
    upsample_nearest,
    weighted_sum,
)


def conv3d_bruteforce(x, w, b=None, stride=1, padding=0):
    """Independent direct-loop oracle for cross-correlation."""
    c_in, d, ww, h = x.shape
    c_out, _, k, _, _ = w.shape
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    od = (d + 2 * p - k) // stride + 1
    ow = (ww + 2 * p - k) // stride + 1
    oh = (h + 2 * p - k) // stride + 1
    out = np.zeros((c_out, od, ow, oh), dtype=x.dtype)
    for co in range(c_out):
        for i in range(od):
            for j in range(ow):
                for l in range(oh):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(k):
                            for bb in range(k):
                                for c in range(k):
                                    acc += (w[co, ci, a, bb, c]
                                            * xp[ci, i * stride + a, j * stride + bb,
                                                 l * stride + c])
                    out[co, i, j, l] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 3, 3, 3)))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        out = conv3d(x, w)
        assert np.array_equal(out.data, x.data)

    def test_ones_2cubed_stride2(self):
        x = Tensor(np.ones((1, 4, 4, 4)))
        w = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = conv3d(x, w, stride=2)
        assert out.data.shape == (1, 2, 2, 2)
        assert np.all(out.data == 8.0)

    def test_zero_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 5, 5, 5)))
        w = Tensor(np.zeros((3, 2, 3, 3, 3)))
        out = conv3d(x, w, padding=1)
        assert np.all(out.data == 0.0)

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((1, 9, 7, 8), dtype=np.float64))
        w = Tensor(np.zeros((2, 1, 3, 3, 3), dtype=np.float64))
        out = conv3d(x, w, stride=2, padding=1)
        expect = tuple((n + 2 * 1 - 3) // 2 + 1 for n in (9, 7, 8))
        assert out.data.shape == (2, *expect)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_bruteforce(self, stride, padding):
        rng = np.random.default_rng(42 + stride * 10 + padding)
        x = rng.normal(size=(2, 5, 4, 6))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        want = conv3d_bruteforce(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((2, 4, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3, 3)))
        with pytest.raises(ShapeError) as e:
            conv3d(x, w)
        assert "(2, 4, 4, 4)" in str(e.value) and "(1, 3, 3, 3, 3)" in str(e.value)

    def test_too_small_spatial_rejected(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        w = Tensor(np.zeros((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            conv3d(x, w)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 4, 4, 4))
        w = Tensor(rng.normal(size=(2, 1, 3, 3, 3)))
        a = 3.7
        out1 = conv3d(Tensor(a * x), w, padding=1)
        out2 = conv3d(Tensor(x), w, padding=1)
        np.testing.assert_allclose(out1.data, a * out2.data, rtol=1e-5)


class TestPointwise:
    def test_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 2, 2, 2))
        out = pointwise_conv(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_single_voxel_affine(self):
        x = Tensor(np.array([1.0, 2.0]).reshape(2, 1, 1, 1))
        w = Tensor(np.array([[3.0, 4.0]]))
        b = Tensor(np.array([5.0]))
        out = pointwise_conv(x, w, b)
        assert out.data.reshape(()) == pytest.approx(16.0)

    def test_equals_conv3d_k1(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 3, 3, 3))
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        got = pointwise_conv(Tensor(x), Tensor(w), Tensor(b))
        want = conv3d(Tensor(x), Tensor(w.reshape(2, 4, 1, 1, 1)), Tensor(b))
        np.testing.assert_allclose(got.data, want.data, atol=1e-12)


class TestActivationsAndPooling:
    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(np.array(0.0))).data == pytest.approx(0.5)

    def test_sigmoid_range_and_stability(self):
        x = Tensor(np.array([-500.0, -1.0, 0.0, 1.0, 500.0], dtype=np.float64))
        out = sigmoid(x).data
        assert np.all(out > 0.0) and np.all(out < 1.0)
        assert out[-1] == pytest.approx(1.0, abs=1e-12)

    def test_relu(self):
        out = relu(Tensor(np.array([-3.0, 3.0])))
        assert out.data[0] == 0.0 and out.data[1] == 3.0

    def test_gap_constant_channel(self):
        x = Tensor(np.full((2, 3, 3, 3), 4.25))
        out = global_avg_pool(x)
        np.testing.assert_allclose(out.data, [4.25, 4.25], rtol=1e-6)

    def test_sigmoid_gradient_is_p_one_minus_p(self):
        rng = np.random.default_rng(3)
        xd = rng.normal(size=(2, 2, 2, 2))
        x = Tensor(xd, requires_grad=True)
        with Tape() as tape:
            p = sigmoid(x)
            out = weighted_sum(p, np.ones_like(xd))
            tape.backward(out)
        pd = 1.0 / (1.0 + np.exp(-xd))
        np.testing.assert_allclose(x.grad, pd * (1 - pd), rtol=1e-5, atol=1e-7)

    def test_upsample_nearest_roundtrip(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 2, 3, 2))
        out = upsample_nearest(Tensor(x), 2)
        assert out.data.shape == (2, 4, 6, 4)
        assert out.data[0, 0, 0, 0] == out.data[0, 1, 1, 1]


class TestBce:
    def test_half_probability(self):
        p = Tensor(np.full((4,), 0.5))
        y = np.ones(4)
        out = bce(p, y)
        assert float(out.data) == pytest.approx(-math.log(0.5), abs=1e-4)

    def test_perfect_prediction_clamped(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        p = Tensor(y.copy())
        out = bce(p, y)
        assert float(out.data) <= -math.log1p(-tc.BCE_EPS) + 1e-12

    def test_masked_mean_matches_direct_recompute(self):
        rng = np.random.default_rng(5)
        pd = rng.uniform(0.05, 0.95, size=(2, 4, 4, 4))
        yd = (rng.uniform(size=pd.shape) > 0.5).astype(np.float64)
        weight = np.zeros_like(pd)
        weight[:, :2] = 1.0
        out = bce(Tensor(pd), yd, weight=weight)
        keep = weight > 0
        expect = np.mean(-(yd[keep] * np.log(pd[keep])
                           + (1 - yd[keep]) * np.log(1 - pd[keep])))
        assert float(out.data) == pytest.approx(expect, rel=1e-5)

    def test_all_masked_rejected(self):
        p = Tensor(np.full((3,), 0.5))
        with pytest.raises(MaskError):
            bce(p, np.ones(3), weight=np.zeros(3))

    def test_target_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce(Tensor(np.full((3,), 0.5)), np.ones(4))


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(np.array(3.0, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            out = mul(x, x)
            tape.backward(out)
        assert float(x.grad) == pytest.approx(6.0)

        def loss():
            return mul(x, x)

        err = finite_diff_check(loss, [x], eps=1e-5)
        assert err < 1e-6

    def test_constant_function_zero_gradient(self):
        x = Tensor(np.ones(5, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            out = weighted_sum(x, np.zeros(5))
            tape.backward(out)
        assert np.all(x.grad == 0.0)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor(np.array([2.0, 3.0], dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            out = weighted_sum(add(x, x), np.ones(2))
            tape.backward(out)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_backward_determinism(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 1, 3, 3, 3)).astype(np.float32), requires_grad=True)
        y = (rng.uniform(size=(2, 2, 2, 2)) > 0.5).astype(np.float32)
        with Tape() as tape:
            out = bce(sigmoid(conv3d(x, w)), y)
            tape.backward(out)
            g1 = (x.grad.copy(), w.grad.copy())
            tape.backward(out)
            g2 = (x.grad.copy(), w.grad.copy())
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_nested_tape_rejected(self):
        with Tape():
            with pytest.raises(RuntimeError):
                Tape().__enter__()
        assert tc.active_tape() is None

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = relu(x)
            with pytest.raises(ShapeError):
                tape.backward(out)


def _fd(loss_fn, params, eps=1e-5):
    return finite_diff_check(loss_fn, params, eps=eps)


class TestFiniteDifferencePrimitives:
    """Every primitive passes central finite differences in f64 at 1e-4."""

    def setup_method(self):
        self.rng = np.random.default_rng(99)

    def _rand(self, shape, lo=-1.0, hi=1.0):
        return Tensor(self.rng.uniform(lo, hi, size=shape), requires_grad=True)

    def test_conv3d(self):
        x = self._rand((2, 4, 4, 4))
        w = self._rand((2, 2, 3, 3, 3))
        b = self._rand((2,))
        r = self.rng.normal(size=(2, 2, 2, 2))

        def loss():
            return weighted_sum(conv3d(x, w, b, stride=2, padding=1), r)

        assert _fd(loss, [x, w, b]) < 1e-4

    def test_pointwise(self):
        x = self._rand((3, 2, 2, 2))
        w = self._rand((2, 3))
        b = self._rand((2,))
        r = self.rng.normal(size=(2, 2, 2, 2))

        def loss():
            return weighted_sum(pointwise_conv(x, w, b), r)

        assert _fd(loss, [x, w, b]) < 1e-4

    def test_linear(self):
        x = self._rand((5,))
        w = self._rand((3, 5))
        b = self._rand((3,))
        r = self.rng.normal(size=3)

        def loss():
            return weighted_sum(linear(x, w, b), r)

        assert _fd(loss, [x, w, b]) < 1e-4

    def test_relu(self):
        x = self._rand((8,), lo=0.1, hi=1.0)
        r = self.rng.normal(size=8)

        def loss():
            return weighted_sum(relu(x), r)

        assert _fd(loss, [x]) < 1e-4

    def test_sigmoid(self):
        x = self._rand((8,))
        r = self.rng.normal(size=8)

        def loss():
            return weighted_sum(sigmoid(x), r)

        assert _fd(loss, [x]) < 1e-4

    def test_global_avg_pool(self):
        x = self._rand((3, 2, 2, 2))
        r = self.rng.normal(size=3)

        def loss():
            return weighted_sum(global_avg_pool(x), r)

        assert _fd(loss, [x]) < 1e-4

    def test_upsample(self):
        x = self._rand((2, 2, 2, 2))
        r = self.rng.normal(size=(2, 4, 4, 4))

        def loss():
            return weighted_sum(upsample_nearest(x, 2), r)

        assert _fd(loss, [x]) < 1e-4

    def test_structural_ops(self):
        a = self._rand((4,))
        b = self._rand((3,))
        r = self.rng.normal(size=4)

        def loss():
            cat = concat1d(a, b)
            sl = slice1d(cat, 1, 5)
            m = reshape(sl, (2, 2))
            back = reshape(m, (4,))
            return weighted_sum(scale(back, 1.7), r)

        assert _fd(loss, [a, b]) < 1e-4

    def test_mul_add_mean(self):
        a = self._rand((6,))
        b = self._rand((6,))
        r = self.rng.normal(size=6)

        def loss():
            s1 = weighted_sum(mul(a, b), r)
            s2 = weighted_sum(add(a, b), r)
            return mean_scalars([s1, s2])

        assert _fd(loss, [a, b]) < 1e-4

    def test_bce_masked(self):
        x = self._rand((2, 3, 3, 3))
        y = (self.rng.uniform(size=(2, 3, 3, 3)) > 0.5).astype(np.float64)
        weight = (self.rng.uniform(size=(2, 3, 3, 3)) > 0.3).astype(np.float64)

        def loss():
            return bce(sigmoid(x), y, weight=weight)

        assert _fd(loss, [x]) < 1e-4


class TestVerificationMode:
    def test_nan_rejected_in_f64(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan], dtype=np.float64))

    def test_f32_not_checked(self):
        t = Tensor(np.array([1.0, np.nan], dtype=np.float32))
        assert np.isnan(t.data[1])
