import numpy as np
import pytest

from src.dae import (DaeParams, HardmaxDenoiser, PosteriorDenoiser, SingleDenoiser, SoftmaxDenoiser,
                     dae_hardmax, dae_single, dae_softmax, hardmax_weights, jacobian_analytic_gt,
                     jacobian_fd, numerical_rank, softmax_weights)
from src.errors import DegenerateStateError, InvalidArgumentError, InvalidParamsError
from src.molrg import posterior_mean, random_model, sample_dataset
from src.schedule import Schedule, ScheduleState, evaluate

UNIT = ScheduleState.from_scale(1.0, 1.0)
E1, E2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])


def test_single_example():
    np.testing.assert_allclose(dae_single(E1, np.array([2.0, 3.0]), UNIT), [1.0, 0.0])


def test_single_matches_posterior_mean(rng):
    model = random_model(rng, 9, 1, 3)
    state = evaluate(Schedule(kind="vp"), 0.4)
    x = rng.standard_normal(9)
    np.testing.assert_allclose(dae_single(model.bases[0], x, state), posterior_mean(model, x, state),
                               atol=1e-12)


def test_single_allows_zero_noise():
    state = ScheduleState.from_scale(2.0, 0.0)
    np.testing.assert_allclose(dae_single(E1, np.array([4.0, 1.0]), state), [2.0, 0.0])


def test_non_orthonormal_basis_is_rejected():
    with pytest.raises(InvalidParamsError):
        dae_single(np.array([[2.0], [0.0]]), np.ones(2), UNIT)
    with pytest.raises(InvalidParamsError):
        DaeParams(bases=(np.array([[1.0, 1.0], [0.0, 1.0]]),))


def test_params_are_read_only(rng):
    params = DaeParams.from_model(random_model(rng, 6, 2, 2))
    with pytest.raises(ValueError):
        params.bases[0][0, 0] = 1.0


def test_softmax_with_one_component_is_single(rng):
    U = random_model(rng, 7, 1, 2).bases[0]
    X = rng.standard_normal((7, 5))
    np.testing.assert_allclose(dae_softmax(DaeParams(bases=(U,)), X, UNIT), dae_single(U, X, UNIT),
                               rtol=1e-14)


def test_softmax_at_ground_truth_is_posterior_mean(rng):
    model = random_model(rng, 10, 3, 2)
    state = evaluate(Schedule(), 0.6)
    X = rng.standard_normal((10, 8))
    np.testing.assert_allclose(dae_softmax(DaeParams.from_model(model), X, state),
                               posterior_mean(model, X, state), atol=1e-12)


def test_softmax_needs_noise():
    with pytest.raises(DegenerateStateError):
        softmax_weights(DaeParams(bases=(E1, E2)), np.ones(2), ScheduleState.from_scale(1.0, 0.0))


def test_hardmax_weights():
    params = DaeParams(bases=(E1, E2), joint_orthonormal=True)
    np.testing.assert_array_equal(hardmax_weights(params, np.array([1.0, 0.0])), [1.0, 0.0])
    np.testing.assert_array_equal(hardmax_weights(params, np.array([1.0, 1.0])), [1.0, 0.0])


def test_hardmax_picks_generating_component(rng):
    model = random_model(rng, 12, 2, 3, mutually_orthogonal=True)
    params = DaeParams.from_model(model)
    x0 = model.bases[1] @ rng.standard_normal(3)
    np.testing.assert_array_equal(hardmax_weights(params, x0), [0.0, 1.0])
    state = evaluate(Schedule(), 0.5)
    np.testing.assert_allclose(dae_hardmax(params, x0, x0, state), state.shrinkage * x0, atol=1e-12)


def test_hardmax_requires_joint_orthonormality(rng):
    params = DaeParams.from_model(random_model(rng, 6, 2, 2))
    with pytest.raises(InvalidParamsError):
        dae_hardmax(params, np.ones(6), np.ones(6), UNIT)


def test_softmax_approaches_hardmax_at_small_noise(rng):
    model = random_model(rng, 16, 2, 3, mutually_orthogonal=True)
    params = DaeParams.from_model(model)
    state = ScheduleState.from_scale(1.0, 0.01)
    for k in range(2):
        x0 = model.bases[k] @ rng.standard_normal(3)
        x0 /= np.linalg.norm(x0)
        x_t = state.s * x0
        assert softmax_weights(params, x_t, state)[k] >= 1 - 1e-6
        deviation = np.max(np.abs(dae_softmax(params, x_t, state) - dae_hardmax(params, x0, x_t, state)))
        assert deviation <= 1e-6


def test_hardmax_denoiser_falls_back_to_softmax(rng):
    params = DaeParams.from_model(random_model(rng, 8, 2, 2, mutually_orthogonal=True))
    x = rng.standard_normal(8)
    np.testing.assert_array_equal(HardmaxDenoiser(params)(x, UNIT), dae_softmax(params, x, UNIT))


def test_fd_jacobian_of_linear_maps():
    J = jacobian_fd(lambda y: dae_single(E1, y, UNIT), np.array([0.3, -1.2]))
    np.testing.assert_allclose(J, [[0.5, 0.0], [0.0, 0.0]], atol=1e-10)
    np.testing.assert_allclose(jacobian_fd(lambda y: y, np.zeros(4)), np.eye(4), atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        jacobian_fd(lambda y: y, np.zeros(2), h=0.0)


def test_analytic_jacobian_matches_fd(rng):
    for _ in range(5):
        model = random_model(rng, 6, 3, [1, 2, 2])
        state = evaluate(Schedule(), float(rng.uniform(0.4, 1.0)))
        x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
        x = state.s * x0 + state.gamma * rng.standard_normal(6)
        fd = jacobian_fd(lambda y: posterior_mean(model, y, state), x)
        np.testing.assert_allclose(jacobian_analytic_gt(model, x, state), fd, atol=1e-5)


def test_learned_softmax_jacobian_matches_fd(rng):
    params = DaeParams.from_model(random_model(rng, 8, 2, 3, mutually_orthogonal=True))
    state = evaluate(Schedule(), 0.7)
    x = rng.standard_normal(8)
    denoiser = SoftmaxDenoiser(params)
    np.testing.assert_allclose(denoiser.jacobian(x, state), jacobian_fd(lambda y: denoiser(y, state), x),
                               atol=1e-5)


def test_jacobian_is_symmetric(rng):
    model = random_model(rng, 10, 2, 3, mutually_orthogonal=True)
    J = jacobian_analytic_gt(model, rng.standard_normal(10), evaluate(Schedule(), 0.5))
    np.testing.assert_allclose(J, J.T, atol=1e-14)


def test_single_denoiser_jacobian():
    J = SingleDenoiser(E1).jacobian(np.array([5.0, 5.0]), UNIT)
    np.testing.assert_array_equal(J, [[0.5, 0.0], [0.0, 0.0]])


def test_numerical_rank_examples():
    assert numerical_rank(np.diag([1.0, 1.0, 0.0, 0.0])).numerical_rank == 2
    assert numerical_rank(np.eye(4)).numerical_rank == 4
    assert numerical_rank(np.zeros((3, 3))).numerical_rank == 0
    with pytest.raises(InvalidArgumentError):
        numerical_rank(np.eye(2), eta=1.0)


def test_rank_is_monotone_in_eta(rng):
    J = rng.standard_normal((6, 6)) @ np.diag([5, 3, 1, 0.1, 0.01, 0.0]) @ rng.standard_normal((6, 6))
    ranks = [numerical_rank(J, eta).numerical_rank for eta in (0.5, 0.9, 0.99, 1 - 1e-12)]
    assert ranks == sorted(ranks)
    assert ranks[-1] == 5


def test_ground_truth_rank_sandwich(rng):
    model = random_model(rng, 48, 2, 6, mutually_orthogonal=True)
    denoiser = PosteriorDenoiser(model)
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    for t in (0.1, 0.3, 0.6, 1.0):
        state = evaluate(Schedule(), t)
        report = numerical_rank(denoiser.jacobian(state.s * x0 + state.gamma * rng.standard_normal(48), state))
        assert 6 <= report.numerical_rank <= 12
        assert report.rank_ratio == report.numerical_rank / 48
