import numpy as np
import pytest
from baby_steps import given, then, when
from numpy.testing import assert_allclose, assert_array_equal

from mmaml._optim import AdamState, adam_step, clip_grad_norm, global_norm


def test_first_adam_step_moves_by_learning_rate():
    with given:
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.3, -4.0, 0.0])}
        state = AdamState.zeros_like(params)

    with when:
        updated, new_state = adam_step(params, grads, state, lr=0.001)

    with then:
        # bias-corrected first step is lr * g / (|g| + eps)
        assert_allclose(updated["w"], [1.0 - 0.001, -2.0 + 0.001, 0.5], atol=1e-9)
        assert new_state.step == 1
        assert new_state.first_moment["w"].shape == (3,)


def test_adam_does_not_mutate_inputs():
    with given:
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([1.0, 1.0])}
        state = AdamState.zeros_like(params)

    with when:
        adam_step(params, grads, state, lr=0.1)

    with then:
        assert_array_equal(params["w"], [1.0, 2.0])
        assert_array_equal(state.first_moment["w"], [0.0, 0.0])
        assert state.step == 0


def test_adam_skips_parameters_without_gradient():
    with given:
        params = {"a": np.ones(2), "b": np.ones(3)}
        state = AdamState.zeros_like(params)

    with when:
        updated, _ = adam_step(params, {"a": np.ones(2)}, state, lr=0.1)

    with then:
        assert updated["b"] is params["b"]
        assert np.all(updated["a"] < 1.0)


def test_adam_minimizes_quadratic():
    with given:
        params = {"x": np.array([3.0, -2.0])}
        state = AdamState.zeros_like(params)

    with when:
        for _ in range(2000):
            params, state = adam_step(params, {"x": 2 * params["x"]}, state, lr=0.05)

    with then:
        assert_allclose(params["x"], 0.0, atol=1e-2)


def test_clip_grad_norm_scales_jointly():
    with given:
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}

    with when:
        clipped, norm = clip_grad_norm(grads, 1.0)

    with then:
        assert norm == pytest.approx(5.0)
        assert global_norm(clipped) == pytest.approx(1.0, rel=1e-5)
        assert_allclose(clipped["a"] / clipped["b"][0, 0], [0.75, 0.0])


@pytest.mark.parametrize("max_norm", [None, 10.0])
def test_clip_grad_norm_passthrough(max_norm):
    with given:
        grads = {"a": np.array([3.0, 4.0])}

    with when:
        clipped, norm = clip_grad_norm(grads, max_norm)

    with then:
        assert norm == pytest.approx(5.0)
        assert_array_equal(clipped["a"], grads["a"])
