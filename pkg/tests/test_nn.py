from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgessd.nn import (
    BatchNormParams,
    ConvSpec,
    DSBlockParams,
    GradientTape,
    ShapeError,
    backward,
    batch_norm,
    conv2d_forward,
    ds_block_forward,
    layer_cost,
    madds_ratio,
    reduction_factor,
    relu6,
    relu6_grad,
    separable_cost,
    standard_cost,
)
from edgessd.nn import kernels
from helpers import check_gradient, min_kink_distance, naive_conv, naive_depthwise


def random_bn(rng, c):
    return BatchNormParams(
        rng.uniform(0.5, 1.5, c), rng.normal(0, 0.3, c), rng.normal(0, 0.2, c), rng.uniform(0.5, 2.0, c)
    )


def random_block(rng, m, n, stride=1):
    return DSBlockParams(
        rng.normal(0, 0.4, (m, 3, 3)), random_bn(rng, m), rng.normal(0, 0.5, (n, m, 1, 1)), random_bn(rng, n), stride
    )


class TestConvForward:
    def test_all_ones_sum(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        y = conv2d_forward(x, w, ConvSpec("standard", 3, 1, 1))
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_pointwise_identity(self, rng):
        x = rng.normal(size=(2, 5, 4, 3))
        w = np.eye(5).reshape(5, 5, 1, 1)
        np.testing.assert_array_equal(conv2d_forward(x, w, ConvSpec("pointwise", 1, 5, 5)), x)

    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    def test_matches_naive_loops(self, rng, backend):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        y = kernels.conv_forward(x, w, 1, 1, backend)
        np.testing.assert_allclose(y, naive_conv(x, w, 1, 1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    @pytest.mark.parametrize("stride,pad,size", [(2, 1, 7), (2, 0, 6), (1, 0, 5), (2, 1, 8)])
    def test_strided_matches_naive(self, rng, backend, stride, pad, size):
        x = rng.normal(size=(2, 3, size, size + 1))
        w = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(kernels.conv_forward(x, w, stride, pad, backend), naive_conv(x, w, stride, pad), atol=1e-12)
        wd = rng.normal(size=(3, 3, 3))
        np.testing.assert_allclose(
            kernels.depthwise_forward(x, wd, stride, pad, backend), naive_depthwise(x, wd, stride, pad), atol=1e-12
        )

    def test_output_size_rule(self):
        spec = ConvSpec("standard", 3, 3, 8, stride=2, padding=1)
        assert spec.output_hw(300, 300) == (150, 150)
        assert ConvSpec("depthwise", 3, 4, 4, 2, 1).output_hw(75, 75) == (38, 38)
        assert ConvSpec("standard", 3, 4, 4, 1, 0).output_hw(3, 3) == (1, 1)

    def test_zero_weights_give_zero(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        y = conv2d_forward(x, np.zeros((4, 3, 3, 3)), ConvSpec("standard", 3, 3, 4, 1, 1))
        assert not y.any()

    def test_depthwise_single_channel_equals_standard(self, rng):
        x = rng.normal(size=(2, 1, 7, 7))
        w = rng.normal(size=(1, 3, 3))
        dw = conv2d_forward(x, w, ConvSpec("depthwise", 3, 1, 1, 2, 1))
        std = conv2d_forward(x, w.reshape(1, 1, 3, 3), ConvSpec("standard", 3, 1, 1, 2, 1))
        np.testing.assert_allclose(dw, std, rtol=0, atol=1e-12)

    def test_depthwise_channels_independent(self, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(3, 3, 3))
        y = conv2d_forward(x, w, ConvSpec("depthwise", 3, 3, 3, 1, 1))
        x2 = x.copy()
        x2[:, 1] += 100.0
        y2 = conv2d_forward(x2, w, ConvSpec("depthwise", 3, 3, 3, 1, 1))
        np.testing.assert_array_equal(y[:, [0, 2]], y2[:, [0, 2]])

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            conv2d_forward(rng.normal(size=(1, 2, 4, 4)), np.ones((1, 3, 3, 3)), ConvSpec("standard", 3, 3, 1))

    def test_weight_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError, match="weights shape"):
            conv2d_forward(rng.normal(size=(1, 3, 4, 4)), np.ones((1, 3, 1, 1)), ConvSpec("standard", 3, 3, 1))

    def test_zero_size_rejected(self):
        with pytest.raises(ShapeError, match="zero-size"):
            conv2d_forward(np.zeros((0, 1, 3, 3)), np.ones((1, 1, 3, 3)), ConvSpec("standard", 3, 1, 1))

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="pointwise", kernel_size=3, in_channels=2, out_channels=2),
            dict(kind="depthwise", kernel_size=3, in_channels=2, out_channels=4),
            dict(kind="standard", kernel_size=3, in_channels=2, out_channels=2, stride=3),
            dict(kind="dilated", kernel_size=3, in_channels=2, out_channels=2),
        ],
    )
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            ConvSpec(**kwargs)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_backends_agree_on_gradients(rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(5, 3, 3, 3))
    gy = rng.normal(size=kernels.conv_forward(x, w, stride, pad, "numpy").shape)
    a = kernels.conv_backward(gy, x, w, stride, pad, "numba")
    b = kernels.conv_backward(gy, x, w, stride, pad, "numpy")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    wd = rng.normal(size=(3, 3, 3))
    gyd = rng.normal(size=kernels.depthwise_forward(x, wd, stride, pad, "numpy").shape)
    a = kernels.depthwise_backward(gyd, x, wd, stride, pad, "numba")
    b = kernels.depthwise_backward(gyd, x, wd, stride, pad, "numpy")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


class TestDSBlock:
    def test_identity_block_is_relu6(self, rng):
        m = 3
        dw = np.zeros((m, 3, 3))
        dw[:, 1, 1] = 1.0
        ident = BatchNormParams(np.ones(m), np.zeros(m), np.zeros(m), np.ones(m), eps=0.0)
        ident2 = BatchNormParams(np.ones(m), np.zeros(m), np.zeros(m), np.ones(m), eps=0.0)
        params = DSBlockParams(dw, ident, np.eye(m).reshape(m, m, 1, 1), ident2)
        x = rng.normal(0, 4, size=(2, m, 5, 5))
        x[0, 0, 0, 0] = 7.0
        y = ds_block_forward(x, params)
        np.testing.assert_array_equal(y, np.clip(x, 0, 6))
        assert y[0, 0, 0, 0] == 6.0

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("training", [False, True])
    def test_matches_sequential_ops(self, rng, stride, training):
        params = random_block(rng, 3, 4, stride)
        x = rng.normal(size=(2, 3, 6, 6))
        dw_spec, pw_spec = params.specs()
        h = kernels.depthwise_forward(x, params.dw_weight, stride, 1, "numpy")
        h = batch_norm(h, params.dw_bn, training, update_stats=False)
        h = np.clip(h, 0, 6)
        h = naive_conv(h, params.pw_weight, 1, 0)
        h = batch_norm(h, params.pw_bn, training, update_stats=False)
        expect = np.clip(h, 0, 6)
        tape = GradientTape() if training else None
        np.testing.assert_allclose(ds_block_forward(x, params, tape, training), expect, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_output_bounded(self, seed, scale):
        rng = np.random.default_rng(seed)
        params = random_block(rng, 2, 3)
        y = ds_block_forward(rng.normal(0, scale, size=(1, 2, 4, 4)), params)
        assert y.min() >= 0.0 and y.max() <= 6.0

    def test_nonpositive_variance_rejected(self, rng):
        bn = BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
        with pytest.raises(ValueError, match="variance"):
            batch_norm(rng.normal(size=(1, 2, 3, 3)), bn)

    def test_running_stats_momentum(self, rng):
        bn = BatchNormParams.identity(2)
        x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
        batch_norm(x, bn, training=True)
        np.testing.assert_allclose(bn.running_mean, 0.01 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(bn.running_var, 0.99 + 0.01 * x.var(axis=(0, 2, 3)))


class TestBackward:
    def test_relu6_derivative(self):
        np.testing.assert_array_equal(relu6_grad([3.0, 7.0, -1.0, 0.0, 6.0]), [1.0, 0.0, 0.0, 0.0, 0.0])
        tape = GradientTape()
        x = tape.watch(np.array([3.0, 7.0, -1.0]), "x")
        relu6(x, tape)
        np.testing.assert_array_equal(backward(tape, np.ones(3))["x"], [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("backend_seed", range(5))
    def test_conv_weight_gradient_fd(self, backend_seed):
        rng = np.random.default_rng(backend_seed)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        spec = ConvSpec("standard", 3, 3, 4, 2, 1)
        tape = GradientTape()
        tape.watch(w, "w")
        tape.watch(x, "x")
        y = conv2d_forward(x, w, spec, tape)
        g = backward(tape, np.ones_like(y))
        f = lambda: conv2d_forward(x, w, spec).sum()  # noqa: E731
        assert check_gradient(f, w, g["w"], rng) < 1e-4
        assert check_gradient(f, x, g["x"], rng) < 1e-4

    def test_constant_function_zero_gradient(self, rng):
        tape = GradientTape()
        x = tape.watch(rng.normal(size=(1, 2, 3, 3)), "x")
        w = tape.watch(rng.normal(size=(2, 2, 1, 1)), "w")
        y = conv2d_forward(x, w, ConvSpec("pointwise", 1, 2, 2), tape)
        g = backward(tape, np.zeros_like(y))
        assert not g["x"].any() and not g["w"].any()
        # a leaf the output never touches also gets zeros
        unused = tape.watch(np.ones(3), "unused")
        assert not backward(tape, np.ones_like(y))["unused"].any()
        assert unused.shape == (3,)

    def test_visits_each_op_once_in_reverse(self, rng):
        params = random_block(rng, 2, 3)
        tape = GradientTape()
        ds_block_forward(rng.normal(size=(2, 2, 4, 4)), params, tape)
        visits = []
        backward(tape, 1.0, visit_log=visits)
        assert visits == [n.op for n in reversed(tape.nodes)]
        assert visits == ["relu6", "batch_norm", "conv2d[pointwise]", "relu6", "batch_norm", "conv2d[depthwise]"]

    @pytest.mark.parametrize("training", [False, True])
    def test_batch_norm_gradient(self, rng, training):
        bn = random_bn(rng, 3)
        x = rng.normal(size=(3, 3, 4, 4))
        wts = rng.normal(size=x.shape)
        tape = GradientTape()
        tape.watch(x, "x")
        tape.watch(bn.gamma, "gamma")
        tape.watch(bn.beta, "beta")
        batch_norm(x, bn, training, tape, update_stats=False)
        g = backward(tape, wts)
        f = lambda: float((batch_norm(x, bn, training, update_stats=False) * wts).sum())  # noqa: E731
        for name, arr in (("x", x), ("gamma", bn.gamma), ("beta", bn.beta)):
            assert check_gradient(f, arr, g[name], rng) < 1e-4, name

    def test_ds_block_gradient(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            params = random_block(rng, 2, 3, stride=2)
            x = rng.normal(size=(2, 2, 5, 5))
            dw_spec, pw_spec = params.specs()
            pre1 = batch_norm(conv2d_forward(x, params.dw_weight, dw_spec), params.dw_bn, True, update_stats=False)
            pre2 = batch_norm(conv2d_forward(relu6(pre1), params.pw_weight, pw_spec), params.pw_bn, True, update_stats=False)
            if min(min_kink_distance(pre1), min_kink_distance(pre2)) > 1e-3:
                break
        wts = rng.normal(size=pre2.shape)
        tape = GradientTape()
        tape.watch(x, "x")
        for name, arr in params.arrays().items():
            tape.watch(arr, name)
        ds_block_forward(x, params, tape)
        g = backward(tape, wts)
        f = lambda: float((ds_block_forward(x, params, GradientTape()) * wts).sum())  # noqa: E731
        for name, arr in [("x", x)] + list(params.arrays().items()):
            assert check_gradient(f, arr, g[name], rng) < 1e-4, name


class TestCost:
    def test_standard_example(self):
        c = standard_cost(3, 32, 64, 112)
        assert (c.params, c.madds) == (18_432, 231_211_008)

    def test_separable_example(self):
        c = separable_cost(3, 32, 64, 112)
        assert (c.params, c.madds) == (2_336, 29_302_784)
        assert madds_ratio(3, 32, 64, 112) == Fraction(29_302_784, 231_211_008) == Fraction(1, 64) + Fraction(1, 9)

    def test_reduction_band_for_1024(self):
        r = reduction_factor(3, 1024)
        assert r == pytest.approx(8.92, abs=5e-3)
        assert 8 <= r < 9

    def test_per_kind(self):
        assert layer_cost(ConvSpec("depthwise", 3, 32, 32), 112) == layer_cost(ConvSpec("depthwise", 3, 32, 32), 112)
        dw = layer_cost(ConvSpec("depthwise", 3, 32, 32), 10)
        pw = layer_cost(ConvSpec("pointwise", 1, 32, 64), 10)
        assert (dw.params, dw.madds) == (288, 28_800)
        assert (pw.params, pw.madds) == (2_048, 204_800)

    def test_rejects_bad_feature_size(self):
        with pytest.raises(ValueError):
            layer_cost(ConvSpec("standard", 3, 1, 1), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 2048), st.integers(1, 2048), st.sampled_from([1, 3, 5, 7]))
    def test_ratio_identity(self, f, m, n, k):
        assert madds_ratio(k, m, n, f) == Fraction(1, n) + Fraction(1, k * k)
        c = standard_cost(k, m, n, f)
        assert c.madds >= c.params
