import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from priormask import numerics as nx
from oracles import naive_conv2d, naive_mse, naive_resize


def grad_check(build, arrays_, step=1e-5):
    """Max relative error over every input array between backprop and central differences."""
    params = [nx.param(a) for a in arrays_]
    out = build(*params)
    out.backward()
    worst = 0.0
    for p in params:
        numeric = nx.numerical_gradient(lambda: float(build(*[nx.const(q.value) for q in params]).value),
                                        p.value, step)
        worst = max(worst, nx.max_relative_error(p.grad, numeric))
    return worst


def weighted(out, r):
    return nx.total(nx.mul(out, r))


class TestConv2d:
    def test_identity_pixel(self):
        out = nx.conv2d(np.ones((1, 1, 1)), np.ones((1, 1, 1, 1)), np.zeros(1))
        assert out.value.tolist() == [[[1.0]]]

    def test_zero_input_gives_bias(self, rng):
        out = nx.conv2d(np.zeros((5, 4, 2)), rng.normal(size=(3, 3, 2, 3)), np.array([0.5, -1.0, 2.0]))
        assert np.array_equal(out.value, np.broadcast_to([0.5, -1.0, 2.0], (5, 4, 3)))

    def test_identity_kernel_is_identity(self, rng):
        x = rng.normal(size=(6, 7, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        assert np.array_equal(nx.conv2d(x, k, np.zeros(3)).value, x)

    def test_matches_naive_loop(self, rng):
        x, k, b = rng.normal(size=(6, 5, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
        np.testing.assert_allclose(nx.conv2d(x, k, b).value, naive_conv2d(x, k, b), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_item(self, rng):
        x, k, b = rng.normal(size=(3, 5, 5, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
        batched = nx.conv2d(x, k, b).value
        for i in range(3):
            np.testing.assert_allclose(batched[i], nx.conv2d(x[i], k, b).value, atol=1e-12)

    def test_gradient_finite_differences(self, rng):
        x, k, b = rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        r = rng.normal(size=(5, 5, 3))
        assert grad_check(lambda x, k, b: weighted(nx.conv2d(x, k, b), r), [x, k, b]) < 1e-6

    def test_channel_mismatch_names_dimension(self, rng):
        with pytest.raises(nx.ShapeError, match="Cin"):
            nx.conv2d(rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 3, 1)), np.zeros(1))

    def test_bias_mismatch(self, rng):
        with pytest.raises(nx.ShapeError, match="bias"):
            nx.conv2d(rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 2, 2)), np.zeros(3))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(nx.ShapeError, match="odd"):
            nx.conv2d(rng.normal(size=(4, 4, 1)), rng.normal(size=(2, 2, 1, 1)), np.zeros(1))


class TestActivations:
    def test_relu_values(self):
        assert nx.relu(np.array([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]

    def test_relu_positive_unchanged(self, rng):
        x = rng.uniform(0.1, 3, size=10)
        assert np.array_equal(nx.relu(x).value, x)

    def test_relu_subgradient_zero_at_zero(self):
        x = nx.param(np.array([0.0]))
        nx.total(nx.relu(x)).backward()
        assert x.grad.tolist() == [0.0]

    def test_relu_gradient(self, rng):
        x = rng.normal(size=50)
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        r = rng.normal(size=50)
        assert grad_check(lambda x: weighted(nx.relu(x), r), [x]) < 1e-6

    def test_softmax_uniform(self):
        np.testing.assert_array_equal(nx.softmax(np.zeros(4)).value, [0.25] * 4)

    def test_softmax_large_logits(self):
        p = nx.softmax(np.array([1000.0, 0.0])).value
        mpmath.mp.dps = 50
        e = mpmath.exp(-1000)
        expected = [float(1 / (1 + e)), float(e / (1 + e))]
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, expected, rtol=1e-15, atol=0)

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_normalised_and_shift_invariant(self, logits, shift):
        p = nx.softmax(logits).value
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(nx.softmax(logits + shift).value, p, atol=1e-12, rtol=0)

    def test_sigmoid_gradient(self, rng):
        x, r = rng.normal(size=20) * 3, rng.normal(size=20)
        assert grad_check(lambda x: weighted(nx.sigmoid(x), r), [x]) < 1e-6


class TestLosses:
    def test_bce_at_half(self, rng):
        t = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        assert nx.bce_loss(np.zeros((4, 4)), t).value == pytest.approx(np.log(2), abs=1e-15)

    def test_bce_confident_correct(self, rng):
        t = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
        assert nx.bce_loss(np.where(t == 1, 20.0, -20.0), t).value < 1e-6

    def test_bce_gradient(self, rng):
        z = rng.normal(size=(8, 8)) * 2
        t = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        assert grad_check(lambda z: nx.bce_loss(z, t), [z]) < 1e-6

    def test_bce_rejects_soft_targets(self):
        with pytest.raises(ValueError, match="binary"):
            nx.bce_loss(np.zeros(3), np.array([0.0, 0.5, 1.0]))

    def test_bce_large_logits_stable(self):
        v = nx.bce_loss(np.array([800.0, -800.0]), np.array([0.0, 1.0])).value
        assert v == pytest.approx(800.0)

    def test_mse_examples(self, rng):
        a = rng.normal(size=(5, 5))
        assert nx.mse_loss(a, a).value == 0.0
        assert nx.mse_loss(a + 1.0, a).value == pytest.approx(1.0, abs=1e-14)

    def test_mse_matches_loop(self, rng):
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        assert nx.mse_loss(a, b).value == pytest.approx(naive_mse(a, b), rel=1e-14)

    def test_mse_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.mse_loss(np.zeros(3), np.zeros(4))

    @given(arrays(np.float64, 6, elements=st.floats(-30, 30).filter(lambda v: v == 0 or abs(v) > 1e-6)),
           arrays(np.int8, 6, elements=st.integers(0, 1)))
    def test_losses_non_negative(self, z, t):
        t = t.astype(float)
        assert nx.bce_loss(z, t).value >= 0
        assert nx.mse_loss(z, t).value >= 0
        assert (nx.mse_loss(z, t).value == 0) == np.array_equal(z, t)


class TestResampling:
    def test_constant_survives_bilinear(self):
        out = nx.resize_bilinear(np.full((5, 7), 0.3), 13, 4).value
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_nearest_2x(self):
        out = nx.upsample_nearest_2x(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]).value[..., 0]
        assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    def test_bilinear_round_trip_against_naive(self, rng):
        src = rng.uniform(size=(32, 32))
        down = nx.resize_bilinear(src, 17, 17).value
        np.testing.assert_allclose(down, naive_resize(src, 17, 17), atol=1e-12)
        back = nx.resize_bilinear(down, 32, 32).value
        np.testing.assert_allclose(back, naive_resize(naive_resize(src, 17, 17), 32, 32), atol=1e-12)
        assert np.abs(back - src).max() < 1.0
        smooth = np.add.outer(np.linspace(0, 1, 32), np.linspace(0, 1, 32)) / 2
        assert np.abs(nx.resize_bilinear(nx.resize_bilinear(smooth, 17, 17).value, 32, 32).value - smooth).max() < 0.05

    def test_zero_size_rejected(self):
        with pytest.raises(nx.ShapeError):
            nx.resize_bilinear(np.ones((3, 3)), 0, 3)

    def test_resample_gradients(self, rng):
        src = rng.normal(size=(6, 5))
        r = rng.normal(size=(9, 4))
        assert grad_check(lambda s: weighted(nx.resize_bilinear(s, 9, 4), r), [src]) < 1e-6
        x = rng.normal(size=(3, 2, 2))
        r2 = rng.normal(size=(6, 4, 2))
        assert grad_check(lambda s: weighted(nx.upsample_nearest_2x(s), r2), [x]) < 1e-6


class TestTape:
    def test_shared_node_accumulates(self):
        x = nx.param(np.array([3.0]))
        y = nx.mul(x, x)
        z = nx.add(y, nx.mul(y, 2.0))  # 3 x^2
        nx.total(z).backward()
        assert x.grad.tolist() == [18.0]

    def test_every_node_backpropagated_once(self):
        calls = []
        x = nx.param(np.array([1.0]))
        y = nx.mul(x, 2.0)
        orig = y.backward_fn
        y.backward_fn = lambda g: (calls.append(1), orig(g))[1]
        z = nx.add(nx.add(y, y), y)
        nx.total(z).backward()
        assert len(calls) == 1
        assert x.grad.tolist() == [6.0]

    def test_non_scalar_needs_seed(self):
        with pytest.raises(nx.ShapeError):
            nx.param(np.ones(3)).backward()


OPS = {
    "conv3x3": (lambda r: [r.normal(size=(4, 4, 2)), r.normal(size=(3, 3, 2, 2)), r.normal(size=2)],
                lambda x, k, b: nx.conv2d(x, k, b)),
    "conv1x1_batched": (lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(size=(1, 1, 2, 3)), r.normal(size=3)],
                        lambda x, k, b: nx.conv2d(x, k, b)),
    "relu": (lambda r: [np.where(np.abs(v := r.normal(size=10)) < 1e-3, 0.5, v)], nx.relu),
    "sigmoid": (lambda r: [r.normal(size=10)], nx.sigmoid),
    "softmax": (lambda r: [r.normal(size=(2, 5))], nx.softmax),
    "resize": (lambda r: [r.normal(size=(4, 5))], lambda s: nx.resize_bilinear(s, 7, 3)),
    "upsample": (lambda r: [r.normal(size=(2, 3, 2))], nx.upsample_nearest_2x),
    "masked_mean": (lambda r: [r.normal(size=(4, 4, 3))],
                    lambda x: nx.masked_mean(x, np.tri(4))),
    "weighted_sum": (lambda r: [r.normal(size=3)],
                     lambda w: nx.weighted_sum(w, np.arange(48.0).reshape(3, 4, 4) / 48)),
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], nx.matmul),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_property_100_trials(name):
    make, op = OPS[name]
    for trial in range(100):
        r = np.random.default_rng(trial)
        inputs = make(r)
        probe = op(*[nx.const(a) for a in inputs])
        weights_ = r.normal(size=probe.shape)
        err = grad_check(lambda *a: weighted(op(*a), weights_), inputs)
        assert err < 1e-4, (name, trial, err)


def test_loss_gradients_100_trials():
    for trial in range(100):
        r = np.random.default_rng(trial)
        z = r.normal(size=(3, 3)) * 2
        t = (r.uniform(size=(3, 3)) > 0.5).astype(float)
        assert grad_check(lambda z: nx.bce_loss(z, t), [z]) < 1e-4
        assert grad_check(lambda z: nx.mse_loss(z, t), [z]) < 1e-4
