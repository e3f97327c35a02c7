import numpy as np
import pytest

from adaseg import tensor as T
from adaseg.tensor import ReluMode, Tape, Tensor
from gradcheck import composite_graph_errors
from oracles import central_fd, rel_error


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def grad_of(fn, *leaves, mode=ReluMode.STANDARD):
    with Tape():
        out = fn(*leaves)
    T.backward(out, mode)
    return [t.grad for t in leaves]


@pytest.fixture(params=["numpy", "torch"])
def conv_backend(request):
    prev = T.conv_backend()
    T.set_conv_backend(request.param)
    yield request.param
    T.set_conv_backend(prev)


class TestConv:
    def test_ones_3x3(self, conv_backend):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_zero_weights(self, conv_backend, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)).astype(np.float32))
        out = T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3), np.float32)), Tensor(np.zeros(4, np.float32)), 1)
        assert out.shape == (2, 4, 5, 5)
        assert not out.data.any()

    def test_1x1_scaling(self, conv_backend, rng):
        x = rng.normal(size=(2, 1, 4, 4)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0, np.float32)), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_array_equal(out.data, 2 * x)

    def test_backends_agree(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        results = {}
        for name in ("numpy", "torch"):
            T.set_conv_backend(name)
            xs, ws, bs = leaf(x), leaf(w), leaf(b)
            with Tape():
                y = T.conv2d(xs, ws, bs, 1)
                s = T.masked_sum(y, np.arange(y.data.size).reshape(y.shape) % 5)
            T.backward(s)
            results[name] = (y.data, xs.grad, ws.grad, bs.grad)
        T.set_conv_backend("auto")
        for a, b_ in zip(results["numpy"], results["torch"]):
            np.testing.assert_allclose(a, b_, rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_error(self):
        with pytest.raises(T.TensorError, match="channels"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)), 1)

    def test_even_kernel_error(self):
        with pytest.raises(T.TensorError, match="odd"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_numpy_gradient_matches_fd(self, rng):
        T.set_conv_backend("numpy")
        try:
            x, w, b = leaf(rng.normal(size=(1, 2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
            weights = rng.normal(size=(1, 3, 5, 5))

            def f():
                return float((T.conv2d(x, w, b, 1).data * weights).sum())

            gx, gw, gb = grad_of(lambda x_, w_, b_: T.masked_sum(T.conv2d(x_, w_, b_, 1), weights), x, w, b)
            for g, t in ((gx, x), (gw, w), (gb, b)):
                assert rel_error(g, central_fd(f, t.data)) < 1e-8
        finally:
            T.set_conv_backend("auto")


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])

    @pytest.mark.parametrize("mode,x,g,expected", [
        (ReluMode.GUIDED, 2.0, -3.0, 0.0),
        (ReluMode.DECONV, -1.0, 4.0, 4.0),
        (ReluMode.STANDARD, -1.0, 4.0, 0.0),
        (ReluMode.STANDARD, 2.0, -3.0, -3.0),
        (ReluMode.DECONV, 2.0, -3.0, 0.0),
        (ReluMode.GUIDED, 2.0, 5.0, 5.0),
        (ReluMode.GUIDED, -2.0, 5.0, 0.0),
    ])
    def test_backward_modes(self, mode, x, g, expected):
        t = leaf([x])
        with Tape():
            y = T.relu(t)
        T.backward(y, mode, seed_grad=np.array([g]))
        assert t.grad[0] == expected


class TestMaxpoolUpsample:
    def test_maxpool_forward_backward(self):
        x = leaf(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        (g,) = grad_of(lambda t: T.sum_all(T.maxpool2(t)), x)
        assert T.maxpool2(Tensor(x.data)).data.item() == 4.0
        np.testing.assert_array_equal(g[0, 0], [[0, 0], [0, 1]])

    def test_maxpool_tie_goes_top_left(self):
        x = leaf(np.full((1, 1, 2, 2), 7.0))
        (g,) = grad_of(lambda t: T.sum_all(T.maxpool2(t)), x)
        np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])

    def test_maxpool_odd_size_error(self):
        with pytest.raises(T.TensorError):
            T.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample(self):
        x = leaf(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        up = T.upsample_nearest2(Tensor(x.data)).data[0, 0]
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], float)
        np.testing.assert_array_equal(up, expected)
        (g,) = grad_of(lambda t: T.sum_all(T.upsample_nearest2(t)), x)
        np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 4.0))

    def test_upsample_then_pool_identity(self, rng):
        x = rng.uniform(0, 5, size=(2, 3, 4, 4))
        np.testing.assert_array_equal(T.maxpool2(T.upsample_nearest2(Tensor(x))).data, x)


class TestBatchnorm:
    def _bn(self, x, gamma=1.0, beta=0.0, training=True, state=None):
        c = x.shape[1]
        state = state or T.BatchNormState(c, np.float64)
        return T.batchnorm(Tensor(x), Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), state,
                           0.4, training).data

    def test_normalizes_two_values(self):
        x = np.array([0.0, 2.0, 0.0, 2.0]).reshape(1, 1, 2, 2)
        out = self._bn(x)
        expected = np.array([-1, 1, -1, 1]) / np.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.ravel(), expected, rtol=1e-12)

    def test_zero_gamma(self, rng):
        assert not self._bn(rng.normal(size=(2, 3, 4, 4)), gamma=0.0).any()

    def test_eval_identity_stats(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_allclose(self._bn(x, training=False), x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_running_update_convention(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 5, 5))
        st = T.BatchNormState(2, np.float64)
        self._bn(x, state=st)
        np.testing.assert_allclose(st.mean, 0.4 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(st.var, 0.6 + 0.4 * x.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_training_gradient_fd(self, rng):
        x, g_, b_ = leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=2)), leaf(rng.normal(size=2))
        weights = rng.normal(size=(3, 2, 3, 3))

        def fwd(a, b, c):
            return T.masked_sum(T.batchnorm(a, b, c, T.BatchNormState(2, np.float64), 0.4, True), weights)

        grads = grad_of(fwd, x, g_, b_)
        for g, t in zip(grads, (x, g_, b_)):
            assert rel_error(g, central_fd(lambda: float(fwd(x, g_, b_).data), t.data)) < 1e-6


class TestDropout:
    def test_rate_zero_and_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        assert T.dropout(x, 0.0, True, rng) is x
        assert T.dropout(x, 0.9, False, rng) is x

    def test_monte_carlo_mean(self):
        x = Tensor(np.linspace(0.5, 2.0, 8).astype(np.float32))
        rng = np.random.default_rng(0)
        draws = np.stack([T.dropout(x, 0.5, True, rng).data for _ in range(10_000)])
        assert abs(draws.mean() / x.data.mean() - 1) < 0.02
        sigma = x.data / np.sqrt(len(draws))  # per-element std of the mean at rate 0.5
        assert np.all(np.abs(draws.mean(axis=0) - x.data) < 5 * sigma)

    def test_needs_rng_in_training(self):
        with pytest.raises(T.TensorError):
            T.dropout(Tensor(np.ones(3)), 0.5, True, None)


class TestSigmoidBackward:
    def test_values(self):
        assert T.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
        assert T.sigmoid(Tensor(np.array([30.0]))).data[0] > 0.999999
        assert np.isfinite(T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data).all()

    def test_derivative_chain(self):
        x, w = leaf([0.0]), leaf([1.0])
        gx, gw = grad_of(lambda a, b: T.sum_all(T.sigmoid(T.mul(b, a))), x, w)
        assert gx[0] == pytest.approx(0.25)
        assert gw[0] == pytest.approx(0.0)

    def test_sum_gradient_ones(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        (g,) = grad_of(T.sum_all, x)
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_tape_consumed_once(self):
        x = leaf([1.0, 2.0])
        with Tape():
            y = T.sum_all(x)
        T.backward(y)
        with pytest.raises(T.TensorError, match="consumed"):
            T.backward(y)

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape():
            y = T.relu(x)
        with pytest.raises(T.TensorError, match="scalar"):
            T.backward(y)

    def test_shared_input_accumulates(self):
        x = leaf([3.0])
        (g,) = grad_of(lambda t: T.sum_all(T.mul(t, t)), x)
        assert g[0] == 6.0


class TestCapture:
    def test_identity_layer(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        with Tape() as tape:
            y = T.mark("identity", x)
            h = T.register_capture(tape, "identity")
        np.testing.assert_array_equal(h.activation, x.data)

    def test_presigmoid_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        with Tape() as tape:
            z = T.mark("logits", T.scale(x, 1.5))
            h = T.register_capture(tape, "logits")
            out = T.sum_all(T.sigmoid(z))
        T.backward(out)
        s = 1 / (1 + np.exp(-z.data))
        np.testing.assert_allclose(h.gradient, s * (1 - s), rtol=1e-12)

    def test_unknown_layer_lists_valid(self):
        with Tape() as tape:
            T.mark("a", Tensor(np.zeros(1)))
            with pytest.raises(KeyError, match="valid ids: a"):
                T.register_capture(tape, "b")

    def test_unet_bottleneck_shape(self, tiny_model):
        x = Tensor(np.zeros((2, 1, 16, 16), np.float32), requires_grad=True)
        with Tape() as tape:
            tiny_model.forward(x)
            h = T.register_capture(tape, "bottleneck")
        assert h.activation.shape == (2, 16, 2, 2)


def test_composite_graphs_match_fd():
    errs, excluded = composite_graph_errors(count=20, seed=1)
    assert errs.max() < 1e-3
    assert excluded < 0.05
