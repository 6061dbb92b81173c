import math

import numpy as np
import pytest

from volnet.errors import EmptyClass, ShapeMismatch
from volnet.optim import AdamState, LossWeights, adam_step, class_weights, wbce


def test_class_weights_training_counts():
    w = class_weights(513, 162)
    assert w.w_pos == pytest.approx(0.6579, abs=1e-4)
    assert w.w_neg == pytest.approx(2.0833, abs=1e-4)
    assert 513 * w.w_pos == 162 * w.w_neg


def test_class_weights_balanced_and_empty():
    assert class_weights(100, 100) == LossWeights(1.0, 1.0)
    with pytest.raises(EmptyClass):
        class_weights(0, 5)


def test_wbce_values():
    one = LossWeights(1.0, 1.0)
    loss, _ = wbce(np.array([0.5]), np.array([1]), one)
    assert loss == pytest.approx(math.log(2))
    loss, _ = wbce(np.array([0.5]), np.array([1]), LossWeights(2.0, 1.0))
    assert loss == pytest.approx(2 * math.log(2))


def test_wbce_clamped_at_extremes():
    loss, grad = wbce(np.array([0.0, 1.0]), np.array([1, 0]), LossWeights(1.0, 1.0))
    assert np.isfinite(loss) and loss == pytest.approx(-math.log(1e-7))
    np.testing.assert_array_equal(grad, 0.0)


def test_wbce_gradient_finite_difference():
    rng = np.random.default_rng(0)
    w = LossWeights(0.7, 2.1)
    for _ in range(50):
        p = rng.uniform(0.05, 0.95, size=6)
        y = rng.integers(0, 2, size=6)
        _, g = wbce(p, y, w)
        h = 1e-6
        num = np.array([(wbce(p + h * e, y, w)[0] - wbce(p - h * e, y, w)[0]) / (2 * h) for e in np.eye(6)])
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-8)) < 1e-5


def test_wbce_monotone():
    w = LossWeights(1.0, 1.0)
    p = np.linspace(0.01, 0.99, 50)
    pos = [wbce(np.array([x]), np.array([1]), w)[0] for x in p]
    neg = [wbce(np.array([x]), np.array([0]), w)[0] for x in p]
    assert np.all(np.diff(pos) < 0) and np.all(np.diff(neg) > 0)


def test_wbce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        wbce(np.array([0.5, 0.5]), np.array([1]), LossWeights(1, 1))


def test_adam_first_step_magnitude():
    params = {"w": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
    grads = {"w": np.array([0.3, -5.0, 1e-3], dtype=np.float32)}
    state = AdamState(lr=1e-4)
    adam_step(params, grads, state)
    # bias-corrected first step moves each coordinate by ~lr * sign(g)
    np.testing.assert_allclose(params["w"], [1.0 - 1e-4, -2.0 + 1e-4, 3.0 - 1e-4], atol=1e-6)
    assert state.step_count == 1


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(1)
    p = rng.standard_normal(5)
    params = {"w": p.copy()}
    state = AdamState(lr=1e-2)
    m = v = np.zeros(5)
    for t in range(1, 11):
        g = rng.standard_normal(5)
        adam_step(params, {"w": g.copy()}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["w"], p, rtol=1e-12)


def test_adam_zero_gradient_is_constant():
    params = {"w": np.ones(4, dtype=np.float32)}
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(4, dtype=np.float32)}, state)
    np.testing.assert_array_equal(params["w"], 1.0)


def test_adam_skips_parameters_without_gradient():
    params = {"a": np.ones(2, dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
    adam_step(params, {"a": np.ones(2, dtype=np.float32)}, AdamState())
    np.testing.assert_array_equal(params["b"], 1.0)
    assert (params["a"] < 1).all()


def test_adam_deterministic():
    def run():
        params = {"w": np.linspace(-1, 1, 7).astype(np.float32)}
        state = AdamState()
        rng = np.random.default_rng(4)
        for _ in range(20):
            adam_step(params, {"w": rng.standard_normal(7).astype(np.float32)}, state)
        return params["w"].tobytes()
    assert run() == run()


def test_adam_shape_checks():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"x": np.zeros(3)}, AdamState())
