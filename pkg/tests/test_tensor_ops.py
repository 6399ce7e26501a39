"""Tests for the dense numeric layer, checked against independent oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from vtdetect.errors import NumericError, ShapeMismatchError
from vtdetect.tensor_ops import (
    ConvLayer,
    GradStore,
    check_gradients,
    clip_gradients,
    conv2d_backward,
    conv2d_forward,
    downsample2x,
    downsample2x_backward,
    sgd_step,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
    upsample_bilinear,
)


def naive_conv2d(x, weights, bias, stride, padding):
    """Six-nested-loop reference convolution, deliberately unoptimized."""
    out_c, in_c, kh, kw = weights.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (xp.shape[1] - kh) // stride + 1
    out_w = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((out_c, out_h, out_w))
    for o in range(out_c):
        for i in range(out_h):
            for j in range(out_w):
                acc = bias[o]
                for c in range(in_c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += weights[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def identity_layer():
    return ConvLayer(weights=np.ones((1, 1, 1, 1)), bias=np.zeros(1))


class TestConvForward:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        npt.assert_array_equal(conv2d_forward(x, identity_layer()), x)

    def test_sum_of_ones(self):
        x = np.ones((1, 2, 2))
        layer = ConvLayer(weights=np.ones((1, 1, 2, 2)), bias=np.zeros(1))
        out = conv2d_forward(x, layer)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 4.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        layer = ConvLayer(weights=w, bias=b, stride=stride, padding=padding)
        npt.assert_allclose(
            conv2d_forward(x, layer), naive_conv2d(x, w, b, stride, padding), atol=1e-12
        )

    def test_channel_mismatch_rejected(self):
        layer = ConvLayer(weights=np.ones((1, 2, 3, 3)), bias=np.zeros(1))
        with pytest.raises(ShapeMismatchError, match="channel"):
            conv2d_forward(np.zeros((1, 5, 5)), layer)

    def test_too_small_input_rejected(self):
        layer = ConvLayer(weights=np.ones((1, 1, 3, 3)), bias=np.zeros(1))
        with pytest.raises(ShapeMismatchError, match="height|width"):
            conv2d_forward(np.zeros((1, 2, 5)), layer)

    def test_linearity_for_bias_free_layers(self):
        rng = np.random.default_rng(3)
        layer = ConvLayer(weights=rng.normal(size=(2, 2, 3, 3)), bias=np.zeros(2), padding=1)
        x = rng.normal(size=(2, 6, 6))
        y = rng.normal(size=(2, 6, 6))
        a, b = 1.7, -0.4
        lhs = conv2d_forward(a * x + b * y, layer)
        rhs = a * conv2d_forward(x, layer) + b * conv2d_forward(y, layer)
        npt.assert_allclose(lhs, rhs, atol=1e-10)


class TestConvBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 4))
        layer = ConvLayer(weights=rng.normal(size=(3, 2, 3, 3)), bias=rng.normal(size=3))
        gx, gw, gb = conv2d_backward(x, layer, np.zeros((3, 2, 2)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_adjoint(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 4, 4))
        g = rng.normal(size=(1, 4, 4))
        gx, _, _ = conv2d_backward(x, identity_layer(), g)
        npt.assert_array_equal(gx, g)

    def test_upstream_shape_rejected(self):
        layer = identity_layer()
        with pytest.raises(ShapeMismatchError, match="upstream"):
            conv2d_backward(np.zeros((1, 4, 4)), layer, np.zeros((1, 3, 3)))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_finite_differences(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)
        layer = ConvLayer(weights=w, bias=b, stride=stride, padding=padding)
        # Scalar loss: weighted sum of the output, fixed random weighting.
        probe = rng.normal(size=conv2d_forward(x, layer).shape)

        def loss_at(x_, w_, b_):
            out = conv2d_forward(x_, ConvLayer(weights=w_, bias=b_, stride=stride, padding=padding))
            return float(np.sum(out * probe))

        gx, gw, gb = conv2d_backward(x, layer, probe)
        h = 1e-5
        for arr, grad, rebuild in (
            (x, gx, lambda a: loss_at(a, w, b)),
            (w, gw, lambda a: loss_at(x, a, b)),
            (b, gb, lambda a: loss_at(x, w, a)),
        ):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = rebuild(arr)
                flat[i] = orig - h
                minus = rebuild(arr)
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                denom = max(abs(numeric), abs(grad.reshape(-1)[i]), 1e-8)
                assert abs(numeric - grad.reshape(-1)[i]) / denom < 1e-4

    def test_adjoint_identity(self):
        # <conv(x), g> == <x, conv_input_backward(g)> for bias-free layers.
        rng = np.random.default_rng(5)
        layer = ConvLayer(weights=rng.normal(size=(3, 2, 3, 3)), bias=np.zeros(3), padding=1)
        for trial in range(20):
            x = rng.normal(size=(2, 6, 7))
            g = rng.normal(size=(3, 6, 7))
            lhs = float(np.sum(conv2d_forward(x, layer) * g))
            gx, _, _ = conv2d_backward(x, layer, g)
            rhs = float(np.sum(x * gx))
            assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array(0.0)) == 0.5

    def test_sigmoid_saturation_bounded(self):
        v = float(sigmoid(np.array(20.0)))
        assert 0.999999 < v < 1.0

    def test_sigmoid_no_overflow_extreme(self):
        out = sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(out))
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_sigmoid_open_interval_and_symmetry(self):
        rng = np.random.default_rng(9)
        t = rng.uniform(-50, 50, size=5000)
        s = sigmoid(t)
        assert np.all(s > 0.0) and np.all(s < 1.0)
        npt.assert_allclose(sigmoid(-t), 1.0 - s, atol=1e-12)

    def test_sigmoid_backward_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=32)
        g = rng.normal(size=32)
        s = sigmoid(x)
        analytic = sigmoid_backward(s, g)
        h = 1e-6
        numeric = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h) * g
        npt.assert_allclose(analytic, numeric, atol=1e-6)

    def test_tanh_backward_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=32)
        g = rng.normal(size=32)
        analytic = tanh_backward(tanh(x), g)
        h = 1e-6
        numeric = (tanh(x + h) - tanh(x - h)) / (2 * h) * g
        npt.assert_allclose(analytic, numeric, atol=1e-6)


def bilinear_half_scale_oracle(img):
    """Independent per-pixel formula: output (i, j) averages its 2x2 source cell."""
    h, w = img.shape
    out = np.zeros((h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = (
                img[2 * i, 2 * j]
                + img[2 * i, 2 * j + 1]
                + img[2 * i + 1, 2 * j]
                + img[2 * i + 1, 2 * j + 1]
            ) / 4.0
    return out


def bilinear_upsample_oracle(img, th, tw):
    """Independent per-pixel bilinear formula with pixel-center alignment."""
    h, w = img.shape
    out = np.zeros((th, tw))
    for i in range(th):
        for j in range(tw):
            sy = min(max((i + 0.5) * h / th - 0.5, 0.0), h - 1.0)
            sx = min(max((j + 0.5) * w / tw - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


class TestResampling:
    def test_downsample_constant(self):
        x = np.full((1, 6, 6), 3.25)
        npt.assert_array_equal(downsample2x(x), np.full((1, 3, 3), 3.25))

    def test_downsample_average_of_corners(self):
        x = np.array([[[0.0, 0.0], [1.0, 1.0]]])
        npt.assert_array_equal(downsample2x(x), np.array([[[0.5]]]))

    def test_downsample_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(21)
        img = rng.normal(size=(7, 9))
        npt.assert_allclose(downsample2x(img[None])[0], bilinear_half_scale_oracle(img), atol=1e-12)

    def test_downsample_too_small_rejected(self):
        with pytest.raises(ShapeMismatchError):
            downsample2x(np.zeros((1, 1, 5)))

    def test_downsample_backward_is_adjoint(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(2, 7, 9))
        g = rng.normal(size=(2, 3, 4))
        lhs = float(np.sum(downsample2x(x) * g))
        rhs = float(np.sum(x * downsample2x_backward(g, x.shape)))
        assert abs(lhs - rhs) < 1e-10

    def test_upsample_constant(self):
        out = upsample_bilinear(np.full((3, 3), 0.7), 9, 6)
        npt.assert_allclose(out, 0.7, atol=1e-15)

    def test_upsample_single_pixel(self):
        out = upsample_bilinear(np.array([[2.5]]), 4, 4)
        npt.assert_array_equal(out, np.full((4, 4), 2.5))

    def test_upsample_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(23)
        img = rng.normal(size=(3, 3))
        npt.assert_allclose(upsample_bilinear(img, 6, 6), bilinear_upsample_oracle(img, 6, 6), atol=1e-12)

    def test_upsample_stays_within_source_range(self):
        rng = np.random.default_rng(24)
        img = rng.uniform(0, 1, size=(4, 5))
        out = upsample_bilinear(img, 11, 13)
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12

    def test_upsample_shrink_rejected(self):
        with pytest.raises(ShapeMismatchError):
            upsample_bilinear(np.zeros((4, 4)), 2, 8)


class TestSGDAndClipping:
    def test_single_multiply_subtract(self):
        params = {"p": np.array([1.0])}
        grads = GradStore(params)
        grads.accumulate("p", np.array([0.5]))
        sgd_step(params, grads, 0.1)
        npt.assert_allclose(params["p"], [0.95])

    def test_zero_gradient_leaves_params(self):
        params = {"a": np.arange(4.0), "b": np.ones((2, 2))}
        before = {k: v.copy() for k, v in params.items()}
        sgd_step(params, GradStore(params), 0.3)
        for k in params:
            npt.assert_array_equal(params[k], before[k])

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(31)
        params = {f"t{i}": rng.normal(size=(3, 2)) for i in range(3)}
        gvals = {k: rng.normal(size=v.shape) for k, v in params.items()}
        expected = {k: params[k] - 0.05 * gvals[k] for k in params}
        grads = GradStore(params)
        for k, g in gvals.items():
            grads.accumulate(k, g)
        sgd_step(params, grads, 0.05)
        for k in params:
            npt.assert_array_equal(params[k], expected[k])
            assert not grads[k].any()  # zeroed after the step

    def test_non_finite_gradient_aborts(self):
        params = {"p": np.ones(3)}
        grads = GradStore(params)
        grads.accumulate("p", np.array([1.0, np.nan, 0.0]))
        with pytest.raises(NumericError):
            sgd_step(params, grads, 0.1)
        npt.assert_array_equal(params["p"], np.ones(3))  # untouched

    def test_clip_scales_by_half(self):
        grads = GradStore({"p": np.zeros(2)})
        grads.accumulate("p", np.array([1.2, 1.6]))  # norm 2.0
        clip_gradients(grads, 1.0)
        npt.assert_allclose(grads["p"], [0.6, 0.8])

    def test_clip_below_threshold_unchanged(self):
        grads = GradStore({"p": np.zeros(1)})
        grads.accumulate("p", np.array([0.3]))
        clip_gradients(grads, 1.0)
        npt.assert_array_equal(grads["p"], [0.3])

    def test_clip_norm_equals_min_of_norms(self):
        rng = np.random.default_rng(33)
        for trial in range(50):
            template = {"a": np.zeros((2, 3)), "b": np.zeros(5)}
            grads = GradStore(template)
            grads.accumulate("a", rng.normal(size=(2, 3)) * rng.uniform(0.1, 5))
            grads.accumulate("b", rng.normal(size=5) * rng.uniform(0.1, 5))
            pre = grads.global_norm()
            max_norm = rng.uniform(0.5, 4.0)
            clip_gradients(grads, max_norm)
            assert abs(grads.global_norm() - min(pre, max_norm)) < 1e-9

    def test_clip_idempotent(self):
        rng = np.random.default_rng(34)
        grads = GradStore({"a": np.zeros(16)})
        grads.accumulate("a", rng.normal(size=16) * 10)
        clip_gradients(grads, 2.0)
        once = grads["a"].copy()
        clip_gradients(grads, 2.0)
        npt.assert_allclose(grads["a"], once, atol=1e-12)

    def test_clip_non_finite_norm_raises(self):
        grads = GradStore({"p": np.zeros(2)})
        grads.accumulate("p", np.array([np.inf, 1.0]))
        with pytest.raises(NumericError):
            clip_gradients(grads, 1.0)


class TestCheckGradients:
    def test_linear_model_quadratic_loss(self):
        # loss = 0.5 * ||W x - t||^2; exact gradients, FD error is pure rounding.
        rng = np.random.default_rng(41)
        params = {"w": rng.normal(size=(3, 4))}
        x = rng.normal(size=4)
        t = rng.normal(size=3)

        def closure():
            r = params["w"] @ x - t
            return 0.5 * float(r @ r), {"w": np.outer(r, x)}

        report = check_gradients(closure, params, tolerance=1e-8, abs_tol=0.0)
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_corrupted_backward_fails(self):
        rng = np.random.default_rng(42)
        params = {"w": rng.normal(size=(2, 2))}
        x = rng.normal(size=2)

        def closure():
            r = params["w"] @ x
            return 0.5 * float(r @ r), {"w": np.outer(r, x) * 1.05}  # wrong on purpose

        report = check_gradients(closure, params, tolerance=1e-4)
        assert not report.passed
        assert "FAIL" in report.summary()
