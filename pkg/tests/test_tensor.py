"""Tensor core: op values, gradient checks, optimizer behavior."""

import math
import warnings

import numpy as np
import pytest

from cosep import tensor as tc
from cosep.tensor import Tensor

from oracles import check_gradients, inflate_kernel, rel_err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_box_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        y = tc.conv2d(x, w, b, stride=1, padding=1).data[0, 0]
        assert y[1, 1] == 9.0
        assert y[0, 0] == 4.0
        assert y[0, 2] == 4.0 and y[2, 0] == 4.0 and y[2, 2] == 4.0

    def test_dilation_preserves_shape(self):
        x = Tensor(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = tc.conv2d(x, w, None, stride=1, padding=2, dilation=2)
        assert y.shape == (1, 1, 5, 5)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((3, 1, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            tc.conv2d(x, w, None)

    def test_nonpositive_output_raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="output size"):
            tc.conv2d(x, w, None)

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.standard_normal((2, 3, 8, 8)))
        w = t64(0.5 * rng.standard_normal((4, 3, 3, 3)))
        b = t64(rng.standard_normal(4))

        def loss():
            y = tc.conv2d(x, w, b, stride=2, padding=1)
            return tc.tsum(tc.mul(y, y))

        check_gradients(loss, [x, w, b], rng, probes=120)

    def test_dilated_gradients(self, rng):
        x = t64(rng.standard_normal((1, 2, 7, 7)))
        w = t64(rng.standard_normal((2, 2, 3, 3)))

        def loss():
            return tc.tsum(tc.sigmoid(tc.conv2d(x, w, None, padding=2, dilation=2)))

        check_gradients(loss, [x, w], rng, probes=100)

    def test_dilation_equals_zero_inflated_kernel(self, rng):
        x = rng.standard_normal((2, 2, 9, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        for d in (2, 3):
            a = tc.conv2d(Tensor(x), Tensor(w), None, padding=d, dilation=d).data
            b = tc.conv2d(Tensor(x), Tensor(inflate_kernel(w, d)), None, padding=d).data
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 7.25))
        y = tc.upsample_bilinear(x, 8, 11).data
        np.testing.assert_allclose(y, 7.25, rtol=1e-6)

    def test_two_by_two_to_three_center(self):
        x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
        y = tc.upsample_bilinear(x, 3, 3).data[0, 0]
        assert abs(y[1, 1] - 1.5) < 1e-6
        np.testing.assert_allclose(y[0], [0.0, 0.5, 1.0], atol=1e-6)
        np.testing.assert_allclose(y[:, 0], [0.0, 1.0, 2.0], atol=1e-6)

    def test_downsampling_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError, match="smaller"):
            tc.upsample_bilinear(x, 2, 8)

    def test_gradients(self, rng):
        x = t64(rng.standard_normal((2, 2, 4, 5)))

        def loss():
            y = tc.upsample_bilinear(x, 9, 7)
            return tc.tsum(tc.mul(y, y))

        check_gradients(loss, [x], rng, probes=100)


class TestSpatialMaxPool:
    def test_single_peak(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        x[0, 0, 2, 1] = 5.0
        assert tc.spatial_max_pool(Tensor(x)).data[0, 0] == 5.0

    def test_tie_gradient_goes_to_first_position(self):
        x = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
        y = tc.spatial_max_pool(x)
        tc.backward(tc.tsum(y))
        expected = np.zeros((1, 2, 3, 3), dtype=np.float32)
        expected[:, :, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_gradients_away_from_ties(self, rng):
        # distinct values guarantee the max is isolated from probe perturbations
        vals = rng.permutation(6 * 25).astype(np.float64).reshape(2, 3, 5, 5)
        x = t64(vals * 0.1)

        def loss():
            y = tc.spatial_max_pool(x)
            return tc.tsum(tc.mul(y, y))

        check_gradients(loss, [x], rng, probes=100)


class TestActivations:
    def test_softmax_uniform_logits(self):
        y = tc.softmax_T(Tensor(np.zeros((4, 32))), T=0.37).data
        np.testing.assert_allclose(y, 1 / 32, atol=1e-7)

    def test_softmax_scalar_values(self):
        y = tc.softmax_T(Tensor(np.array([[1.0, 0.0]])), T=1.0).data[0]
        assert abs(y[0] - 0.7311) < 1e-4
        assert abs(y[1] - 0.2689) < 1e-4

    def test_softmax_low_temperature_is_one_hot(self):
        y = tc.softmax_T(Tensor(np.array([[1.0, 0.0]])), T=0.1).data[0]
        assert y[0] >= 0.9999

    def test_softmax_sums_to_one(self, rng):
        x = Tensor(rng.standard_normal((8, 16)).astype(np.float32) * 10)
        for T in (0.01, 0.125, 1.0, 10.0):
            s = tc.softmax_T(x, T).data.sum(axis=-1)
            np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_softmax_shift_invariance(self, rng):
        x = rng.standard_normal((5, 12)).astype(np.float32)
        a = tc.softmax_T(Tensor(x), 0.5).data
        b = tc.softmax_T(Tensor(x + 13.75), 0.5).data
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_softmax_temperature_equals_scaled_logits(self, rng):
        x = rng.standard_normal((6, 10)).astype(np.float32)
        for T in (0.01, 0.125, 1.0, 10.0):
            a = tc.softmax_T(Tensor(x), T).data
            b = tc.softmax_T(Tensor(x / T), 1.0).data
            assert np.max(np.abs(a - b)) <= 1e-6

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            tc.softmax_T(Tensor(np.zeros((1, 4))), T=0.0)
        with pytest.raises(ValueError, match="positive"):
            tc.softmax_T(Tensor(np.zeros((1, 4))), T=-1.0)

    def test_softmax_gradients(self, rng):
        x = t64(rng.standard_normal((3, 7)))
        target = Tensor(rng.random((3, 7)), dtype=np.float64)

        def loss():
            return tc.tsum(tc.mul(tc.softmax_T(x, 0.5), target))

        check_gradients(loss, [x], rng, probes=100)

    def test_sigmoid_gradients(self, rng):
        x = t64(rng.standard_normal((4, 9)))

        def loss():
            return tc.tsum(tc.mul(tc.sigmoid(x), tc.sigmoid(x)))

        check_gradients(loss, [x], rng, probes=72)

    def test_relu_gradients_away_from_kink(self, rng):
        base = rng.uniform(0.2, 1.0, size=(5, 6)) * rng.choice([-1.0, 1.0], size=(5, 6))
        x = t64(base)

        def loss():
            return tc.tsum(tc.mul(tc.relu(x), Tensor(np.arange(30, dtype=np.float64).reshape(5, 6), dtype=np.float64)))

        check_gradients(loss, [x], rng, probes=30)


class TestBceLoss:
    def test_half_prediction_is_ln2(self):
        pred = Tensor(np.full((3, 8), 0.5))
        target = Tensor((np.arange(24).reshape(3, 8) % 2).astype(np.float32))
        loss = tc.bce_loss(pred, target).item()
        assert abs(loss - math.log(2)) < 1e-6

    def test_perfect_prediction_is_tiny(self):
        target = Tensor((np.arange(16).reshape(4, 4) % 2).astype(np.float32))
        loss = tc.bce_loss(Tensor(target.data.copy()), target).item()
        assert loss <= 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            tc.bce_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_gradients(self, rng):
        logits = t64(rng.standard_normal((3, 5)))
        target = Tensor((rng.random((3, 5)) > 0.5).astype(np.float64), dtype=np.float64)

        def loss():
            return tc.bce_loss(tc.sigmoid(logits), target)

        check_gradients(loss, [logits], rng, probes=15, h=1e-4)


class TestBackwardAndOptimizers:
    def test_quadratic_gradient(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = tc.tsum(tc.mul(w, w))
        tc.backward(loss)
        np.testing.assert_allclose(w.grad, [2.0, 4.0], rtol=1e-6)

    def test_sgd_step(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = tc.SGD([w], lr=0.1)
        tc.backward(tc.tsum(tc.mul(w, w)))
        opt.step()
        np.testing.assert_allclose(w.data, [0.8, 1.6], rtol=1e-6)

    def test_backward_rejects_non_scalar(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tc.backward(tc.mul(w, w))

    def test_step_before_backward_warns_and_noops(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = tc.SGD([w], lr=0.5)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            opt.step()
        assert any("backward" in str(c.message) for c in caught)
        assert w.data[0] == 1.0

    def test_zero_grad_resets_exactly(self):
        w = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        tc.backward(tc.tsum(tc.mul(w, w)))
        assert np.any(w.grad != 0)
        w.zero_grad()
        assert np.all(w.grad == 0)

    def test_grad_accumulates_across_backwards(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        tc.backward(tc.tsum(w))
        tc.backward(tc.tsum(w))
        assert w.grad[0] == 2.0

    def test_two_layer_net_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 6, 6)), dtype=np.float64)
        w1 = t64(0.5 * rng.standard_normal((3, 2, 3, 3)))
        b1 = t64(rng.standard_normal(3) * 0.1)
        w2 = t64(0.5 * rng.standard_normal((4, 3, 3, 3)))
        b2 = t64(rng.standard_normal(4) * 0.1)
        target = Tensor((rng.random((2, 4)) > 0.5).astype(np.float64), dtype=np.float64)

        def loss():
            h = tc.relu(tc.conv2d(x, w1, b1, stride=1, padding=1))
            h = tc.conv2d(h, w2, b2, stride=2, padding=1)
            v = tc.sigmoid(tc.spatial_max_pool(h))
            return tc.bce_loss(v, target)

        worst = check_gradients(loss, [w1, b1, w2, b2], rng, probes=120, h=1e-4)
        assert worst < 1e-3

    def test_adam_decreases_quadratic(self):
        w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = tc.Adam([w], lr=0.05)
        first = None
        for _ in range(200):
            opt.zero_grad()
            loss = tc.tsum(tc.mul(w, w))
            if first is None:
                first = loss.item()
            tc.backward(loss)
            opt.step()
        assert tc.tsum(tc.mul(w, w)).item() < 1e-3 * first

    def test_forward_is_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = tc.conv2d(Tensor(x), Tensor(w), None, padding=1).data
        b = tc.conv2d(Tensor(x), Tensor(w), None, padding=1).data
        assert np.array_equal(a, b)


class TestStructuralOps:
    def test_concat_and_slicing_gradients(self, rng):
        a = t64(rng.standard_normal((2, 3, 4, 4)))
        b = t64(rng.standard_normal((2, 2, 4, 4)))

        def loss():
            y = tc.concat([a, b], axis=1)
            return tc.tsum(tc.mul(y, y))

        check_gradients(loss, [a, b], rng, probes=80)

    def test_broadcast_mul_gradients(self, rng):
        v = t64(rng.standard_normal((2, 3)))
        feats = t64(rng.standard_normal((2, 3, 4, 4)))

        def loss():
            vv = tc.reshape(v, (2, 3, 1, 1))
            return tc.tsum(tc.sigmoid(tc.tsum(tc.mul(vv, feats), axis=1)))

        check_gradients(loss, [v, feats], rng, probes=100)

    def test_no_grad_suppresses_graph(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with tc.no_grad():
            y = tc.mul(w, w)
        assert not y.requires_grad and y._backward is None
