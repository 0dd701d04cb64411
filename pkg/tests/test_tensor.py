import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acdc.tensor import (
    MomentumState,
    NumericGuardError,
    ShapeError,
    affine,
    finite_diff_grad,
    losses,
    relative_error,
    sgd_momentum_step,
    sigmoid,
    softmax,
    xavier_bound,
    xavier_sample,
)

finite = st.floats(-30, 30, allow_nan=False)


class TestAffine:
    def test_zero_map(self):
        out = affine(np.array([3.0, -1.0]), np.zeros((4, 2)), np.zeros(4))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_identity(self):
        np.testing.assert_array_equal(affine(np.array([1.0, 2.0]), np.eye(2), np.zeros(2)), [1, 2])

    def test_hand_value(self):
        out = affine(np.array([1.0, 2.0]), np.array([[1.0, 1.0]]), np.array([0.5]))
        np.testing.assert_array_equal(out, [3.5])

    @pytest.mark.parametrize("x,W,b", [
        (np.ones(3), np.ones((2, 2)), np.ones(2)),
        (np.ones(2), np.ones((2, 2)), np.ones(3)),
        (np.ones(2), np.ones(2), np.ones(2)),
    ])
    def test_mismatch_raises(self, x, W, b):
        with pytest.raises(ShapeError):
            affine(x, W, b)


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_large_input_bounded(self):
        assert sigmoid(800.0) <= 1.0
        assert sigmoid(-800.0) >= 0.0

    def test_scalar_value(self):
        assert sigmoid(0.6237) == pytest.approx(1 / (1 + math.exp(-0.6237)), abs=1e-15)
        assert sigmoid(0.6237) == pytest.approx(0.6511, abs=5e-5)

    @given(arrays(np.float64, 5, elements=finite))
    def test_strictly_inside_unit_interval(self, x):
        s = sigmoid(x)
        assert np.all(s > 0) and np.all(s < 1)


class TestLosses:
    def test_mse_at_target(self):
        p = np.array([0.2, 0.7])
        loss, grad = losses("mse", p, p)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_multiclass_certain(self):
        loss, _ = losses("multiclass-log", np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        assert loss == 0.0

    def test_binary_half(self):
        loss, _ = losses("binary-log", np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_out_of_range_probability(self):
        with pytest.raises(NumericGuardError):
            losses("binary-log", np.array([1.2]), np.array([1.0]))
        with pytest.raises(NumericGuardError):
            losses("multiclass-log", np.array([np.nan, 1.0]), np.array([0.0, 1.0]))

    def test_saturated_probability_is_finite(self):
        loss, _ = losses("binary-log", np.array([0.0]), np.array([1.0]))
        assert loss == pytest.approx(-math.log(1e-12))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            losses("hinge", np.ones(1), np.ones(1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses("mse", np.ones(2), np.ones(3))

    @pytest.mark.parametrize("kind", ["mse", "binary-log", "multiclass-log"])
    def test_gradient_wrt_preactivation(self, kind, rng):
        z = rng.normal(size=4)
        target = np.eye(4)[1] if kind == "multiclass-log" else rng.uniform(size=4)
        act = softmax if kind == "multiclass-log" else sigmoid
        _, grad = losses(kind, act(z), target)
        num = finite_diff_grad(lambda p: losses(kind, act(p["z"]), target)[0], {"z": z.copy()})
        np.testing.assert_allclose(grad, num["z"], rtol=1e-6, atol=1e-9)

    @settings(max_examples=50)
    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=st.floats(0, 1)))
    def test_non_negative(self, z, t):
        for kind in ("mse", "binary-log"):
            assert losses(kind, sigmoid(z), t)[0] >= 0.0
        onehot = np.eye(3)[int(np.argmax(t))]
        assert losses("multiclass-log", softmax(z), onehot)[0] >= 0.0


class TestXavier:
    def test_bound(self, rng):
        W = xavier_sample(3, 3, rng)
        assert W.shape == (3, 3)
        assert np.all(np.abs(W) <= 1.0)

    def test_default_orientation(self, rng):
        assert xavier_sample(5, 2, rng).shape == (2, 5)

    def test_determinism(self):
        a = xavier_sample(4, 6, np.random.default_rng(3))
        b = xavier_sample(4, 6, np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()

    def test_variance(self, rng):
        W = xavier_sample(7, 3, rng, shape=(100_000,))
        want = 2.0 / (7 + 3)
        assert abs(W.var() - want) / want < 0.05
        assert xavier_bound(7, 3) == pytest.approx(math.sqrt(6 / 10))

    def test_rejects_empty_fan(self, rng):
        with pytest.raises(ValueError):
            xavier_sample(0, 3, rng)


class TestMomentum:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, 2.0])}
        st_ = MomentumState(p)
        sgd_momentum_step(p, {"w": np.zeros(2)}, st_, 0.01, 0.95)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_plain_sgd_without_momentum(self):
        p = {"w": np.array([1.0])}
        sgd_momentum_step(p, {"w": np.array([2.0])}, MomentumState(p), 0.1, 0.0)
        np.testing.assert_allclose(p["w"], [0.8])

    def test_two_steps_hand_value(self):
        p = {"w": np.zeros(1)}
        st_ = MomentumState(p)
        for _ in range(2):
            sgd_momentum_step(p, {"w": np.ones(1)}, st_, 0.01, 0.95)
        np.testing.assert_allclose(p["w"], [-0.0295], atol=1e-15)

    def test_velocity_starts_at_zero_and_mirrors(self):
        p = {"a": np.ones((2, 3)), "b": np.ones(4)}
        st_ = MomentumState(p)
        assert all(np.all(v == 0) and v.shape == p[k].shape for k, v in st_.velocity.items())
        st_.check(p)
        p["b"] = np.ones(5)
        with pytest.raises(ShapeError):
            st_.check(p)

    def test_shape_mismatch(self):
        p = {"w": np.ones(2)}
        with pytest.raises(ShapeError):
            sgd_momentum_step(p, {"w": np.ones(3)}, MomentumState(p), 0.1, 0.9)

    def test_missing_gradient_leaves_param(self):
        p = {"w": np.ones(2), "v": np.ones(2)}
        sgd_momentum_step(p, {"w": np.ones(2)}, MomentumState(p), 0.5, 0.0)
        np.testing.assert_array_equal(p["v"], 1.0)


class TestFiniteDifferences:
    def test_square(self):
        g = finite_diff_grad(lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])}, eps=1e-5)
        assert abs(g["x"][0] - 6.0) < 1e-6

    def test_linear_exact(self):
        c = np.array([1.5, -2.0, 0.25])
        for eps in (1e-2, 1e-5):
            g = finite_diff_grad(lambda p: float(c @ p["x"]), {"x": np.zeros(3)}, eps=eps)
            np.testing.assert_allclose(g["x"], c, rtol=1e-9)

    def test_restores_params(self):
        p = {"x": np.array([0.1, 0.2])}
        finite_diff_grad(lambda q: float(np.sum(q["x"] ** 3)), p)
        np.testing.assert_array_equal(p["x"], [0.1, 0.2])

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: 0.0, {"x": np.zeros(1)}, eps=0.0)

    def test_relative_error(self):
        a = {"x": np.array([1.0, 0.0])}
        assert relative_error(a, a) == 0.0
        assert relative_error(a, {"x": np.array([0.0, 0.0])}) == pytest.approx(1.0)
