import numpy as np
import pytest
from baby_steps import given, then, when
from numpy.testing import assert_allclose, assert_array_equal

from mmaml._autodiff import ShapeError, check_gradients, constant, grad, leaf
from mmaml._task_network import (
    MlpParameters,
    ModulationError,
    ModulationOperator,
    ModulationSet,
    forward,
    forward_with_activations,
    init_parameters,
    mse_loss,
)
from mmaml.tasks import RngStream

from ._utils import numeric_grad

_X = np.array([-4.0, -1.5, 0.2, 2.5, 4.8])


def _film(theta: MlpParameters, gamma: float, beta: float) -> ModulationSet:
    return ModulationSet(ModulationOperator.FILM, tuple(
        (constant(np.full(w, gamma)), constant(np.full(w, beta))) for w in theta.hidden_sizes
    ))


def test_default_network_layout():
    with when:
        theta = init_parameters(RngStream(0))

    with then:
        assert len(theta.weights) == 4
        assert theta.block_count == 3
        assert theta.hidden_sizes == (100, 100, 100)
        assert [w.shape for w in theta.weights] == [(1, 100), (100, 100), (100, 100), (100, 1)]


def test_init_biases_zero_and_weight_scale():
    with when:
        theta = init_parameters(RngStream(1))

    with then:
        for b in theta.biases:
            assert_array_equal(b.value, 0.0)
        for w in theta.weights[1:-1]:
            expected = 1.0 / np.sqrt(w.shape[0])
            assert 0.8 * expected <= w.value.std() <= 1.2 * expected


def test_init_is_deterministic():
    with when:
        first = init_parameters(RngStream(2), (4, 3))
        second = init_parameters(RngStream(2), (4, 3))

    with then:
        for a, b in zip(first.nodes(), second.nodes()):
            assert_array_equal(a.value, b.value)


def test_named_round_trip():
    with given:
        theta = init_parameters(RngStream(3), (4, 3))

    with when:
        named = theta.named()
        restored = MlpParameters.from_named(named)

    with then:
        assert list(named) == ["theta.w0", "theta.b0", "theta.w1", "theta.b1",
                               "theta.w2", "theta.b2"]
        assert restored == theta


def test_identity_film_equals_identity_operator():
    with given:
        theta = init_parameters(RngStream(4))

    with when:
        plain = forward(_X, theta, ModulationSet.identity())
        film = forward(_X, theta, _film(theta, 1.0, 0.0))

    with then:
        assert_array_equal(plain.value, film.value)


def test_sigmoid_gating_at_zero_halves_pre_activations():
    with given:
        theta = init_parameters(RngStream(5), (6, 6))
        gates = ModulationSet(ModulationOperator.SIGMOID, tuple(
            (constant(np.full(w, 0.5)), None) for w in theta.hidden_sizes))

    with when:
        _, plain = forward_with_activations(_X, theta, ModulationSet.identity())
        _, gated = forward_with_activations(_X, theta, gates)

    with then:
        assert_array_equal(gated.modulated[0].value, 0.5 * plain.pre_activations[0].value)


def test_film_zero_scale_erases_input_dependence():
    with given:
        theta = init_parameters(RngStream(6), (5, 5))
        tau = _film(theta, 0.0, 0.7)

    with when:
        _, acts = forward_with_activations(_X, theta, tau)

    with then:
        first_block = np.maximum(acts.modulated[0].value, 0.0)
        assert_allclose(first_block, 0.7)


def test_modulation_is_local_to_its_block():
    with given:
        theta = init_parameters(RngStream(7), (4, 4, 4))
        base = _film(theta, 1.0, 0.0)
        changed = ModulationSet(ModulationOperator.FILM, base.blocks[:2] + (
            (constant(np.full(4, 3.0)), constant(np.full(4, -1.0))),))

    with when:
        _, before = forward_with_activations(_X, theta, base)
        _, after = forward_with_activations(_X, theta, changed)

    with then:
        for i in range(3):
            assert_array_equal(before.pre_activations[i].value, after.pre_activations[i].value)
        assert not np.array_equal(before.modulated[2].value, after.modulated[2].value)


def test_forward_gradient_wrt_theta():
    with given:
        theta = init_parameters(RngStream(8), (3, 3))
        y = np.sin(_X)
        values = [n.value for n in theta.nodes()]

        def loss(*nodes):
            return mse_loss(forward(_X, theta.replace(list(nodes)), ModulationSet.identity()), y)

    with when:
        result = check_gradients(loss, values)

    with then:
        assert result.passed(), result


def test_forward_gradient_wrt_modulation():
    with given:
        theta = init_parameters(RngStream(9), (3, 3))
        y = np.cos(_X)
        gammas = [np.array([1.2, 0.8, 1.1]), np.array([0.9, 1.3, 0.7])]
        betas = [np.array([0.1, -0.2, 0.05]), np.array([0.0, 0.3, -0.1])]

        def loss(g0, b0, g1, b1):
            tau = ModulationSet(ModulationOperator.FILM, ((g0, b0), (g1, b1)))
            return mse_loss(forward(_X, theta, tau), y)

    with when:
        result = check_gradients(loss, [gammas[0], betas[0], gammas[1], betas[1]])

    with then:
        assert result.passed(), result


@pytest.mark.parametrize(("pred", "target", "expected"), [
    ([0.5, -1.0], [0.5, -1.0], 0.0),
    ([0.0, 0.0], [1.0, -1.0], 1.0),
])
def test_mse_loss(pred, target, expected):
    with when:
        res = mse_loss(leaf(np.array(pred)), np.array(target))

    with then:
        assert res.item() == pytest.approx(expected)


def test_mse_gradient():
    with given:
        pred = np.array([0.3, -0.7, 1.2])
        target = np.array([0.0, 0.5, 1.0])

    with when:
        node = leaf(pred)
        analytic, = grad(mse_loss(node, target), [node])
        numeric = numeric_grad(lambda p: mse_loss(constant(p), target).item(), pred)

    with then:
        assert_allclose(analytic, 2 * (pred - target) / 3)
        assert_allclose(analytic, numeric, rtol=1e-6)


def test_mse_shape_mismatch():
    with when, pytest.raises(ShapeError) as exc:
        mse_loss(leaf(np.zeros(3)), np.zeros(4))

    with then:
        assert exc.value.op == "mse_loss"


def test_modulation_must_fit_network():
    with given:
        theta = init_parameters(RngStream(10), (4, 4))
        wrong = ModulationSet(ModulationOperator.FILM,
                              ((constant(np.ones(4)), constant(np.zeros(4))),))

    with when, pytest.raises(ModulationError):
        forward(_X, theta, wrong)


def test_forward_rejects_matrix_input():
    with given:
        theta = init_parameters(RngStream(11), (2,))

    with when, pytest.raises(ShapeError):
        forward(np.zeros((2, 2)), theta, ModulationSet.identity())
