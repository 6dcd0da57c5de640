import numpy as np
import pytest

from veinnet.ops import (BatchNorm2d, Conv2d, Dense, MaxPool2d, ReLU, Sigmoid,
                         channel_pool, conv2d_direct, conv_out_extent,
                         maxpool_reference, softmax, spatial_pool)
from veinnet.tensor import ShapeError


def rand_conv_config(rng):
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    in_ch = int(rng.integers(1, 4))
    out_ch = int(rng.integers(1, 5))
    # pick extents that tile under (k, stride, pad)
    oh = int(rng.integers(1, 5))
    ow = int(rng.integers(1, 5))
    h = (oh - 1) * stride + k - 2 * pad
    w = (ow - 1) * stride + k - 2 * pad
    if h < 1 or w < 1:
        return None
    n = int(rng.integers(1, 3))
    return n, in_ch, out_ch, k, stride, pad, h, w


class TestConv2d:
    def test_stage1_shape(self):
        layer = Conv2d(1, 16, 5, stride=1, pad=2)
        y = layer.forward(np.zeros((1, 1, 81, 333), np.float32))
        assert y.shape == (1, 16, 81, 333)

    def test_all_ones_kernel(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
        layer = Conv2d(1, 1, 3, stride=1, pad=1, dtype=np.float64)
        layer.w[:] = 1.0
        layer.b[:] = 0.0
        y = layer.forward(x)
        assert y[0, 0, 1, 1] == 45.0
        assert y[0, 0, 0, 0] == 12.0  # 1+2+4+5

    def test_zero_weights_constant_bias(self):
        layer = Conv2d(2, 3, 3, pad=1)
        layer.w[:] = 0.0
        layer.b[:] = [1.0, -2.0, 0.5]
        y = layer.forward(np.random.default_rng(0).random((2, 2, 4, 4),
                                                          dtype=np.float32))
        for o, b in enumerate([1.0, -2.0, 0.5]):
            assert np.allclose(y[:, o], b)

    def test_channel_mismatch(self):
        layer = Conv2d(3, 4, 3)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 2, 5, 5), np.float32))

    def test_non_integral_extent(self):
        layer = Conv2d(1, 1, 3, stride=2, pad=0)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 1, 4, 4), np.float32))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_path(self, seed):
        rng = np.random.default_rng(seed)
        cfg = rand_conv_config(rng)
        if cfg is None:
            return
        n, in_ch, out_ch, k, stride, pad, h, w = cfg
        layer = Conv2d(in_ch, out_ch, k, stride, pad, rng=rng, dtype=np.float64)
        x = rng.standard_normal((n, in_ch, h, w))
        fast = layer.forward(x)
        ref = conv2d_direct(x, layer.w, layer.b, stride, pad)
        assert np.max(np.abs(fast - ref)) <= 1e-5 * max(1.0, np.max(np.abs(ref)))

    def test_backward_zero_grad(self):
        layer = Conv2d(2, 3, 3, pad=1, dtype=np.float64)
        x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
        y = layer.forward(x)
        gin = layer.backward(np.zeros_like(y))
        assert (gin == 0).all() and (layer.dw == 0).all() and (layer.db == 0).all()

    def test_backward_1x1_kernel_analytic(self):
        rng = np.random.default_rng(2)
        layer = Conv2d(3, 4, 1, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 5, 5))
        y = layer.forward(x)
        g = rng.standard_normal(y.shape)
        gin = layer.backward(g)
        expected = np.einsum("oc,nohw->nchw", layer.w[:, :, 0, 0], g)
        assert np.array_equal(gin, expected) or np.allclose(gin, expected,
                                                            rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_linearity_zero_bias(self, seed):
        rng = np.random.default_rng(seed)
        layer = Conv2d(2, 3, 3, pad=1, rng=rng, dtype=np.float64)
        layer.b[:] = 0.0
        x1 = rng.standard_normal((1, 2, 5, 5))
        x2 = rng.standard_normal((1, 2, 5, 5))
        a, b = 0.7, -1.3
        lhs = layer.forward(a * x1 + b * x2)
        rhs = a * layer.forward(x1) + b * layer.forward(x2)
        assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-12)


class TestBatchNorm:
    def test_normalizes_in_training(self):
        rng = np.random.default_rng(0)
        layer = BatchNorm2d(3, dtype=np.float64)
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
        y = layer.forward(x, training=True)
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_constant_channel_gives_shift(self):
        layer = BatchNorm2d(2, dtype=np.float64)
        layer.shift[:] = [3.0, -1.0]
        x = np.ones((2, 2, 3, 3))
        y = layer.forward(x, training=True)
        assert np.allclose(y[:, 0], 3.0) and np.allclose(y[:, 1], -1.0)

    def test_inference_affine(self):
        layer = BatchNorm2d(1, dtype=np.float64)
        layer.scale[:] = 2.0
        layer.shift[:] = 3.0
        x = np.random.default_rng(1).standard_normal((2, 1, 3, 3))
        y = layer.forward(x, training=False)
        eps = layer.eps
        assert np.allclose(y, 2.0 * x / np.sqrt(1 + eps) + 3.0, atol=1e-10)

    def test_inference_is_pure_affine(self):
        rng = np.random.default_rng(2)
        layer = BatchNorm2d(2, dtype=np.float64)
        layer.running_mean[:] = rng.standard_normal(2)
        layer.running_var[:] = rng.random(2) + 0.5
        x = rng.standard_normal((2, 2, 4, 4))
        alpha = 1.7
        y0 = layer.forward(np.zeros_like(x), training=False)
        yx = layer.forward(x, training=False)
        yax = layer.forward(alpha * x, training=False)
        assert np.allclose(yax - y0, alpha * (yx - y0), rtol=1e-5, atol=1e-12)

    def test_single_element_axis_rejected(self):
        layer = BatchNorm2d(2)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 2, 1, 1), np.float32), training=True)

    def test_backward_zero(self):
        layer = BatchNorm2d(2, dtype=np.float64)
        x = np.random.default_rng(3).standard_normal((2, 2, 3, 3))
        y = layer.forward(x, training=True)
        gin = layer.backward(np.zeros_like(y))
        assert (gin == 0).all() and (layer.dscale == 0).all()

    def test_mean_removal_property(self):
        # constant upstream gradient with unit scale sums to ~0 over the
        # normalization axes
        layer = BatchNorm2d(2, dtype=np.float64)
        x = np.random.default_rng(4).standard_normal((4, 2, 3, 3))
        layer.forward(x, training=True)
        gin = layer.backward(np.ones((4, 2, 3, 3)))
        assert np.allclose(gin.sum(axis=(0, 2, 3)), 0, atol=1e-6)

    def test_running_stats_update(self):
        layer = BatchNorm2d(1, dtype=np.float64)
        x = np.full((2, 1, 2, 2), 10.0)
        layer.forward(x, training=True)
        assert np.isclose(layer.running_mean[0], 0.9 * 0 + 0.1 * 10)


class TestReLU:
    def test_definition(self):
        layer = ReLU()
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        assert np.array_equal(layer.forward(x).ravel(), [0, 0, 2])

    def test_all_negative(self):
        layer = ReLU()
        x = -np.ones((1, 2, 2, 2))
        assert (layer.forward(x) == 0).all()
        assert (layer.backward(np.ones_like(x)) == 0).all()

    def test_gradient_at_zero_is_zero(self):
        layer = ReLU()
        x = np.zeros((1, 1, 1, 1))
        layer.forward(x)
        assert layer.backward(np.ones_like(x))[0, 0, 0, 0] == 0

    def test_finite_difference_away_from_kink(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 3, 3))
        x = np.where(np.abs(x) < 1e-3, x + 0.1, x)  # kink exclusion
        layer = ReLU()
        layer.forward(x)
        g = rng.standard_normal(x.shape)
        gin = layer.backward(g)
        h = 1e-6
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = ((np.maximum(xp, 0) * g).sum() - (np.maximum(xm, 0) * g).sum()) / (2 * h)
            assert abs(num - gin[idx]) < 1e-6


class TestMaxPool:
    def test_stage_shapes(self):
        pool = MaxPool2d(3, 3)
        assert pool.forward(np.zeros((1, 16, 81, 333), np.float32)).shape \
            == (1, 16, 27, 111)
        assert pool.forward(np.zeros((1, 32, 27, 111), np.float32)).shape \
            == (1, 32, 9, 37)

    def test_single_window(self):
        pool = MaxPool2d(3, 3)
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
        y = pool.forward(x)
        assert y[0, 0, 0, 0] == 9
        gin = pool.backward(np.full((1, 1, 1, 1), 5.0))
        expected = np.zeros((3, 3))
        expected[2, 2] = 5.0
        assert np.array_equal(gin[0, 0], expected)

    def test_tie_goes_to_lowest_linear_index(self):
        pool = MaxPool2d(2, 2)
        x = np.full((1, 1, 2, 2), 7.0)
        pool.forward(x)
        gin = pool.backward(np.ones((1, 1, 1, 1)))
        assert gin[0, 0, 0, 0] == 1.0
        assert gin.sum() == 1.0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        window = int(rng.integers(1, 4))
        stride = int(rng.integers(1, window + 1))
        oh, ow = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h = (oh - 1) * stride + window
        w = (ow - 1) * stride + window
        h, w = min(h, 12), min(w, 12)
        if (h - window) % stride or (w - window) % stride:
            return
        x = rng.standard_normal((n, c, h, w))
        pool = MaxPool2d(window, stride)
        assert np.array_equal(pool.forward(x), maxpool_reference(x, window, stride))

    def test_non_integral_extent(self):
        with pytest.raises(ShapeError):
            MaxPool2d(3, 3).forward(np.zeros((1, 1, 8, 9), np.float32))


class TestGlobalPools:
    def test_constant_channel(self):
        x = np.full((1, 2, 3, 3), 4.5)
        assert np.allclose(spatial_pool(x, "avg"), 4.5)
        assert np.allclose(spatial_pool(x, "max"), 4.5)

    def test_hand_case(self):
        x = np.array([[1.0, 2.0], [3.0, 6.0]]).reshape(1, 1, 2, 2)
        assert spatial_pool(x, "avg")[0, 0, 0, 0] == 3.0
        assert spatial_pool(x, "max")[0, 0, 0, 0] == 6.0

    def test_descriptor_shape(self):
        x = np.zeros((1, 32, 9, 37), np.float32)
        assert spatial_pool(x, "avg").shape == (1, 32, 1, 1)

    def test_channel_pool_identity_on_single_channel(self):
        x = np.random.default_rng(0).random((2, 1, 3, 4))
        assert np.array_equal(channel_pool(x, "avg"), x)
        assert np.array_equal(channel_pool(x, "max"), x)

    def test_channel_pool_constant_channels(self):
        x = np.stack([np.full((3, 4), 1.0), np.full((3, 4), 3.0)])[None]
        assert np.allclose(channel_pool(x, "avg"), 2.0)
        assert np.allclose(channel_pool(x, "max"), 3.0)

    def test_channel_pool_shape(self):
        x = np.zeros((1, 32, 9, 37), np.float32)
        assert channel_pool(x, "max").shape == (1, 1, 9, 37)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            spatial_pool(np.zeros((1, 1, 2, 2)), "sum")


class TestDense:
    def test_identity(self):
        layer = Dense(4, 4, dtype=np.float64)
        layer.w[:] = np.eye(4)
        layer.b[:] = 0.0
        x = np.random.default_rng(0).standard_normal((3, 4, 1, 1))
        assert np.allclose(layer.forward(x), x)

    def test_head_shape(self):
        layer = Dense(10656, 312)
        y = layer.forward(np.zeros((1, 10656, 1, 1), np.float32))
        assert y.shape == (1, 312, 1, 1)

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            Dense(4, 2).forward(np.zeros((1, 5, 1, 1), np.float32))

    def test_backward_outer_product(self):
        rng = np.random.default_rng(1)
        layer = Dense(3, 2, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 1, 1))
        layer.forward(x)
        g = rng.standard_normal((2, 2, 1, 1))
        gin = layer.backward(g)
        g2d, x2d = g.reshape(2, 2), x.reshape(2, 3)
        assert np.allclose(layer.dw, g2d.T @ x2d)
        assert np.allclose(gin.reshape(2, 3), g2d @ layer.w)


class TestSigmoid:
    def test_symmetry_point(self):
        layer = Sigmoid()
        assert layer.forward(np.zeros((1, 1, 1, 1)))[0, 0, 0, 0] == 0.5

    def test_scalar_value(self):
        layer = Sigmoid()
        y = layer.forward(np.full((1, 1, 1, 1), 2.0))
        assert abs(y[0, 0, 0, 0] - 0.880797) < 1e-5

    def test_open_interval_range(self):
        rng = np.random.default_rng(0)
        y = Sigmoid().forward(rng.standard_normal((2, 3, 4, 4)) * 10)
        assert (y > 0).all() and (y < 1).all()

    def test_backward(self):
        layer = Sigmoid()
        x = np.array([[[[0.3]]]])
        y = layer.forward(x)
        g = layer.backward(np.ones_like(x))
        assert np.isclose(g[0, 0, 0, 0], y[0, 0, 0, 0] * (1 - y[0, 0, 0, 0]))


class TestSoftmax:
    def test_uniform_logits(self):
        z = np.zeros((2, 5, 1, 1))
        assert np.allclose(softmax(z), 0.2)

    def test_analytic_two_class(self):
        z = np.array([0.0, np.log(2.0)]).reshape(1, 2, 1, 1)
        p = softmax(z)
        assert np.allclose(p.ravel(), [1 / 3, 2 / 3])

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((3, 7, 1, 1))
        assert np.allclose(softmax(z), softmax(z + 123.0), atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        p = softmax(rng.standard_normal((4, 6, 1, 1)) * 20)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert (p > 0).all() and (p < 1).all()


def test_conv_out_extent_math():
    assert conv_out_extent(81, 5, 1, 2) == 81
    assert conv_out_extent(81, 3, 3, 0) == 27
    assert conv_out_extent(27, 3, 3, 0) == 9
    assert conv_out_extent(333, 3, 3, 0) == 111
    assert conv_out_extent(111, 3, 3, 0) == 37
