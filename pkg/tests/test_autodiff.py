import numpy as np
import pytest
from hypothesis import given, strategies as st

from nucleonet.autodiff import (
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    ReLU,
    Sequential,
    Sigmoid,
    Softmax,
    Upsample2,
    check_layer,
    col2im,
    concat,
    conv2d_forward,
    dense_forward,
    dropout,
    finite_diff_check,
    im2col,
    maxpool2,
    relu,
    sigmoid,
    softmax,
)
from nucleonet.errors import ConfigError


def naive_conv(x, kernel, bias):
    c, h, w = x.shape
    f, _, k, _ = kernel.shape
    out = np.zeros((f, h - k + 1, w - k + 1))
    for o in range(f):
        for y in range(h - k + 1):
            for xx in range(w - k + 1):
                out[o, y, xx] = bias[o] + np.sum(kernel[o] * x[:, y:y + k, xx:xx + k])
    return out


class TestConv:
    def test_reference_first_layer_shape(self):
        x = np.zeros((3, 32, 32))
        params = {"kernel": np.zeros((80, 3, 3, 3)), "bias": np.zeros(80)}
        assert conv2d_forward(x, params).shape == (80, 30, 30)

    def test_delta_kernel_crops(self, rng):
        x = rng.random((1, 6, 7))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = conv2d_forward(x, {"kernel": kernel, "bias": np.zeros(1)})
        np.testing.assert_array_equal(out, x[:, 1:-1, 1:-1])

    def test_all_ones(self):
        out = conv2d_forward(np.ones((1, 3, 3)), {"kernel": np.ones((1, 1, 3, 3)), "bias": np.zeros(1)})
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9.0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((3, 7, 6))
        kernel = rng.standard_normal((4, 3, 3, 3))
        bias = rng.standard_normal(4)
        got = conv2d_forward(x, {"kernel": kernel, "bias": bias})
        np.testing.assert_allclose(got, naive_conv(x, kernel, bias), atol=1e-12)

    def test_batched_input(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        params = {"kernel": rng.standard_normal((2, 3, 2, 2)), "bias": rng.standard_normal(2)}
        out = conv2d_forward(x, params)
        for i in range(2):
            np.testing.assert_allclose(out[i], conv2d_forward(x[i], params), atol=1e-12)

    def test_channel_mismatch_names_dims(self):
        layer = Conv2D(3, 4, 3, name="conv1", rng=0)
        with pytest.raises(ConfigError, match="conv1.*2 channels.*3"):
            layer.forward(np.zeros((1, 2, 5, 5)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ConfigError, match="smaller than kernel"):
            Conv2D(1, 1, 3, rng=0).forward(np.zeros((1, 1, 2, 2)))

    def test_padding_preserves_extent(self, rng):
        layer = Conv2D(2, 3, 3, pad=1, rng=0)
        assert layer.forward(rng.random((1, 2, 5, 5))).shape == (1, 3, 5, 5)

    def test_gradients(self, rng):
        assert check_layer(Conv2D(3, 4, 3, rng=1), rng.standard_normal((2, 3, 6, 5))) < 1e-6
        assert check_layer(Conv2D(2, 3, 2, pad=2, rng=1), rng.standard_normal((2, 2, 4, 4))) < 1e-6

    def test_param_grad_shapes(self, rng):
        layer = Conv2D(3, 4, 3, rng=1)
        layer.forward(rng.random((2, 3, 5, 5)))
        layer.backward(np.ones((2, 4, 3, 3)))
        for k in layer.params:
            assert layer.grads[k].shape == layer.params[k].shape


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(2, 6), w=st.integers(2, 6), k=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_col2im_is_adjoint_of_im2col(n, c, h, w, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    cols = im2col(x, k)
    y = r.standard_normal(cols.shape)
    # <im2col(x), y> == <x, col2im(y)>
    assert np.isclose(np.sum(cols * y), np.sum(x * col2im(y, x.shape, k)), rtol=1e-10, atol=1e-10)


class TestMaxPool:
    def test_reference_odd_extent(self):
        assert maxpool2(np.zeros((140, 7, 7))).shape == (140, 3, 3)

    def test_constant(self):
        np.testing.assert_array_equal(maxpool2(np.full((2, 4, 4), 3.5)), np.full((2, 2, 2), 3.5))

    def test_window_argmax_routing(self):
        layer = MaxPool2()
        out = layer.forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out[0, 0, 0, 0] == 4.0
        dx = layer.backward(np.array([[[[2.5]]]]))
        np.testing.assert_array_equal(dx[0, 0], [[0, 0], [0, 2.5]])

    def test_ties_go_to_first_in_row_major_order(self):
        layer = MaxPool2()
        layer.forward(np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(layer.backward(np.ones((1, 1, 1, 1)))[0, 0], [[1, 0], [0, 0]])

    def test_dropped_row_gets_no_gradient(self, rng):
        layer = MaxPool2()
        layer.forward(rng.random((1, 1, 5, 5)))
        dx = layer.backward(np.ones((1, 1, 2, 2)))
        assert dx[..., 4, :].sum() == 0 and dx[..., :, 4].sum() == 0

    def test_too_small(self):
        with pytest.raises(ConfigError):
            maxpool2(np.zeros((1, 1, 3)))

    def test_gradient(self, rng):
        assert check_layer(MaxPool2(), rng.standard_normal((2, 3, 5, 6))) < 1e-6


class TestDense:
    def test_reference_fc1(self):
        params = {"weight": np.zeros((400, 1260)), "bias": np.zeros(400)}
        assert dense_forward(np.zeros(140 * 3 * 3), params).shape == (400,)

    def test_identity(self, rng):
        x = rng.random(5)
        np.testing.assert_array_equal(dense_forward(x, {"weight": np.eye(5), "bias": np.zeros(5)}), x)

    def test_hand_example(self):
        out = dense_forward(np.array([1.0, 1.0]), {"weight": np.array([[1.0, 2.0], [3.0, 4.0]]), "bias": np.ones(2)})
        np.testing.assert_array_equal(out, [4.0, 8.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            dense_forward(np.zeros(3), {"weight": np.zeros((2, 4)), "bias": np.zeros(2)})

    def test_gradient(self, rng):
        assert check_layer(Dense(7, 5, rng=3), rng.standard_normal((4, 7))) < 1e-6


class TestActivations:
    def test_softmax_equal_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(6)), np.full(6, 1 / 6))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
    def test_softmax_shift_invariance(self, logits, shift):
        x = np.array(logits)
        np.testing.assert_allclose(softmax(x), softmax(x + shift), atol=1e-12)

    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=10))
    def test_softmax_simplex(self, logits):
        p = softmax(np.array(logits))
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1) < 1e-9

    def test_softmax_extreme_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_scalars(self):
        assert sigmoid(0.0) == 0.5
        assert relu(-3.0) == 0.0
        assert relu(2.0) == 2.0

    def test_sigmoid_stable(self):
        out = sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    @pytest.mark.parametrize("layer", [ReLU(), Sigmoid(), Softmax(), Flatten()], ids=lambda l: type(l).__name__)
    def test_gradients(self, layer, rng):
        x = rng.standard_normal((3, 2, 2, 2)) if isinstance(layer, Flatten) else rng.standard_normal((4, 6))
        assert check_layer(layer, x) < 1e-6

    def test_upsample(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        out = Upsample2().forward(x)
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_array_equal(out[:, :, ::2, ::2], x)
        assert check_layer(Upsample2(), x) < 1e-6


class TestDropout:
    def test_same_rng_state_same_mask(self, rng):
        x = rng.random((50, 50))
        np.testing.assert_array_equal(dropout(x, 0.3, 7, True), dropout(x, 0.3, 7, True))

    def test_different_state_different_mask(self, rng):
        x = np.ones((50, 50))
        assert not np.array_equal(dropout(x, 0.3, 1, True), dropout(x, 0.3, 2, True))

    def test_eval_is_identity(self, rng):
        x = rng.random((4, 4))
        np.testing.assert_array_equal(dropout(x, 0.5, 0, training=False), x)

    def test_inverted_scaling(self):
        out = dropout(np.ones(200_000), 0.05, 3, True)
        assert set(np.unique(out)) <= {0.0, 1 / 0.95}
        assert abs(out.mean() - 1.0) < 0.01

    def test_p_one_rejected(self):
        with pytest.raises(ConfigError):
            Dropout(1.0)

    def test_training_needs_rng(self):
        with pytest.raises(ConfigError):
            Dropout(0.2).forward(np.ones(3), training=True)

    def test_gradient(self, rng):
        assert check_layer(Dropout(0.3), rng.standard_normal((4, 7)), training=True) < 1e-6


class TestConcat:
    def test_single_part_identity(self):
        np.testing.assert_array_equal(concat([np.arange(4.0)]), np.arange(4.0))

    def test_order_preserved(self):
        out = concat([np.zeros(2), np.ones(3), np.full(4, 2.0)])
        np.testing.assert_array_equal(out, [0, 0, 1, 1, 1, 2, 2, 2, 2])

    def test_backward_splits(self, rng):
        layer = Concat()
        layer.forward([rng.random((2, 3)), rng.random((2, 1))])
        a, b = layer.backward(np.arange(8.0).reshape(2, 4))
        np.testing.assert_array_equal(a, [[0, 1, 2], [4, 5, 6]])
        np.testing.assert_array_equal(b, [[3], [7]])


class TestFiniteDiff:
    def test_non_scalar_loss_rejected(self):
        x = np.ones(3)
        with pytest.raises(ConfigError, match="scalar"):
            finite_diff_check(lambda: (x * 2, {"x": np.full(3, 2.0)}), {"x": x})

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        err = finite_diff_check(lambda: (float(np.sum(x**2)), {"x": 3 * x}), {"x": x})
        assert err > 0.1

    def test_dense_sigmoid_bce(self, rng):
        from nucleonet.losses import bce_multilabel

        net = Sequential([Dense(5, 3, rng=0), Sigmoid()])
        x = rng.standard_normal((4, 5))
        y = (rng.random((4, 3)) < 0.5).astype(int)

        def lg():
            loss, g = bce_multilabel(net.forward(x), y)
            dx = net.backward(g)
            return loss, {"x": dx, **dict(net.named_grads())}

        assert finite_diff_check(lg, {"x": x, **dict(net.named_params())}) < 1e-4

    def test_restores_arrays(self, rng):
        x = rng.random(4)
        before = x.copy()
        finite_diff_check(lambda: (float(np.sum(x**3)), {"x": 3 * x**2}), {"x": x})
        np.testing.assert_array_equal(x, before)
