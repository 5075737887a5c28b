import numpy as np
import pytest

from src import experiments
from src.errors import InvalidArgumentError, InvalidIndexError, UndefinedScoreError
from src.experiments import (Method, ModelFamily, average_ranks, concentration_suite,
                             concentration_violations, gl_curve, gl_score, ground_truth_score,
                             invariant_suite, nearest_neighbor_total, phase_grid, rank_vs_snr,
                             reverse_sample, run_trial, semantic_sweep, trial_seed)
from src.molrg import MoLRGModel, random_model, sample_dataset
from src.schedule import Schedule, ScheduleKind, evaluate


# phase grids ----------------------------------------------------------------

def test_pca_phase_grid_is_a_sharp_dichotomy():
    grid = phase_grid(ModelFamily(K=1, n=20), [2, 4], [1, 2, 3, 4], trials=3, method="pca")
    np.testing.assert_array_equal(grid.rates, [[0, 1, 1, 1], [0, 0, 0, 1]])
    assert len(grid.records) == 2 * 4 * 3
    assert grid.rows()[0] == (2, 1, 3, 0, 0.0)


def test_phase_grid_does_not_depend_on_threads():
    kwargs = dict(family=ModelFamily(K=2, n=20), d_values=[2], N_values=[2, 6], trials=3,
                  method=Method.KSUBSPACES, noise=0.1, master_seed=11, restarts=2)
    serial = phase_grid(threads=1, **kwargs)
    parallel = phase_grid(threads=4, **kwargs)
    np.testing.assert_array_equal(serial.successes, parallel.successes)
    assert serial.records == parallel.records


def test_trial_seeds():
    first = trial_seed(0, 3, 5, 1).generate_state(2)
    np.testing.assert_array_equal(first, trial_seed(0, 3, 5, 1).generate_state(2))
    assert not np.array_equal(first, trial_seed(0, 3, 5, 2).generate_state(2))
    with pytest.raises(InvalidArgumentError):
        trial_seed(-1, 3, 5, 1)


def test_pca_needs_a_single_component():
    with pytest.raises(InvalidArgumentError):
        run_trial(ModelFamily(K=2, n=10), 2, 4, Method.PCA, 0.0, trial_seed(0, 2, 4, 0))


def test_sgd_trial_runs_with_small_budget():
    overrides = {"learning_rate": 1e-3, "batch": 32, "iters": 10}
    report = run_trial(ModelFamily(K=1, n=10), 2, 4, Method.SGD, 0.0, trial_seed(0, 2, 4, 0),
                       train_overrides=overrides)
    assert report.permutation == (0,)
    assert np.isfinite(report.mean_distance)


def test_sgd_trial_batch_follows_samples_per_component(monkeypatch):
    seen = []
    original = experiments.sgd_train

    def spy(dataset, config, *args, **kwargs):
        seen.append((dataset.N, config.batch, config.iters))
        return original(dataset, config, *args, **kwargs)

    monkeypatch.setattr(experiments, "sgd_train", spy)
    for N in (3, 7):
        run_trial(ModelFamily(K=1, n=10), 2, N, Method.SGD, 0.0, trial_seed(0, 2, N, 0),
                  train_overrides={"iters": 2})
    assert seen == [(3, 384, 2), (7, 896, 2)]


def test_phase_grid_validates_ranges():
    with pytest.raises(InvalidArgumentError):
        phase_grid(ModelFamily(), [], [2], trials=1, method="pca")
    with pytest.raises(InvalidArgumentError):
        phase_grid(ModelFamily(), [2], [2], trials=0, method="pca")


# GL score -------------------------------------------------------------------

def test_nearest_neighbor_total():
    assert nearest_neighbor_total(np.array([[0.0, 3.0]]), np.array([[1.0]])) == pytest.approx(3.0)
    points = np.array([[0.0, 1.0, 3.0]])
    assert nearest_neighbor_total(points, points, exclude_self=True) == pytest.approx(1 + 1 + 2)


def test_gl_score_memorization_and_fresh_draws(rng):
    model = random_model(rng, 48, 2, 6)
    training = sample_dataset(model, 200, 0.0, rng).samples
    reference = sample_dataset(model, 200, 0.0, rng).samples
    assert gl_score(training.copy(), training, reference) == 0.0
    fresh = sample_dataset(model, 200, 0.0, rng).samples
    assert 0.7 <= gl_score(fresh, training, reference) <= 1.3


def test_gl_score_undefined_for_coincident_reference(rng):
    points = rng.standard_normal((3, 4))
    reference = np.ones((3, 2))
    with pytest.raises(UndefinedScoreError):
        gl_score(points, points, reference)
    with pytest.raises(InvalidArgumentError):
        gl_score(points[:, :1], points, points)


def test_gl_curve_rows():
    overrides = {"learning_rate": 1e-4, "batch": 64, "iters": 20}
    curve = gl_curve(ModelFamily(K=1, n=12), [2], [1, 5], [0], train_overrides=overrides, steps=6)
    assert curve.ratios == [1.0, 5.0]
    assert curve.seeds == [0, 0]
    assert all(np.isfinite(s) and s >= 0 for s in curve.scores)
    assert curve.config["schedule"] == "vp"
    assert len(curve.rows()) == 2
    pooled = curve.pooled()
    assert [ratio for ratio, _ in pooled] == [1.0, 5.0]
    assert [score for _, score in pooled] == pytest.approx(curve.scores)


def test_pooled_gl_sums_terms_before_dividing():
    curve = experiments.GlCurve(ratios=[1.0, 1.0, 2.0], scores=[0.5, 1.0, 1.0], seeds=[0, 1, 0],
                                numerators=[1.0, 3.0, 2.0], denominators=[2.0, 3.0, 2.0])
    assert curve.pooled() == [(1.0, pytest.approx(0.8)), (2.0, pytest.approx(1.0))]


@pytest.mark.slow
def test_gl_score_is_in_band_at_large_ratio():
    curve = gl_curve(ModelFamily(K=1, n=48), [3], [20], [0, 1])
    assert all(0.7 <= score <= 1.3 for score in curve.scores)


@pytest.mark.slow
def test_gl_score_dips_when_samples_match_dimension():
    # a start close to the truth keeps the learned subspace exact; the dip is the small-sample spread
    overrides = {"init_perturb": 0.01, "learning_rate": 1e-3, "iters": 200}
    curve = gl_curve(ModelFamily(K=1, n=12), [2], [1, 20], range(150), train_overrides=overrides)
    (_, at_dimension), (_, large) = curve.pooled()
    assert 0.7 <= large <= 1.3
    assert at_dimension < 0.9
    assert at_dimension < large - 0.1


# sampling -------------------------------------------------------------------

def _relative_residual(model, x):
    U = model.bases[0]
    return float(np.mean(np.linalg.norm(x - U @ (U.T @ x), axis=0) / np.linalg.norm(x, axis=0)))


def test_ground_truth_sampler_lands_on_subspace(rng):
    model = random_model(rng, 10, 1, 2)
    schedule = Schedule(kind=ScheduleKind.VP)
    score = ground_truth_score(model)
    fine = reverse_sample(score, schedule, 18, np.random.default_rng(1), count=200, n=10)
    coarse = reverse_sample(score, schedule, 2, np.random.default_rng(1), count=200, n=10)
    assert _relative_residual(model, fine) <= 0.05
    assert _relative_residual(model, fine) < _relative_residual(model, coarse)


def test_zero_score_leaves_ve_samples_unchanged(rng):
    x = rng.standard_normal((5, 3))
    out = reverse_sample(lambda y, state: np.zeros_like(y), Schedule(), 10, x_init=x)
    np.testing.assert_array_equal(out, x)


def test_sampler_needs_a_start():
    with pytest.raises(InvalidArgumentError):
        reverse_sample(lambda y, state: y, Schedule(), 4)


# Jacobian rank --------------------------------------------------------------

def test_single_subspace_rank_is_d(rng):
    model = random_model(rng, 16, 1, 4)
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    reports = rank_vs_snr(model, x0, Schedule(), rng, trajectories=3, time_steps=8)
    assert len(reports) == 24
    assert {r.numerical_rank for r in reports} == {4}
    rows = average_ranks(reports)
    assert [row[0] for row in rows] == sorted(row[0] for row in rows)
    assert all(row[2] == 4.0 for row in rows)


def test_mixture_rank_stays_between_d_and_sum(rng):
    model = random_model(rng, 48, 2, 6, mutually_orthogonal=True)
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    reports = rank_vs_snr(model, x0, Schedule(), rng, trajectories=15, time_steps=16)
    assert all(6 <= r.numerical_rank <= 12 for r in reports)


# semantic sweep -------------------------------------------------------------

def test_sweep_at_zero_matches_plain_sampling(rng):
    model = random_model(rng, 10, 1, 3)
    schedule = Schedule()
    state = evaluate(schedule, 0.5)
    x_t = state.s * sample_dataset(model, 1, 0.0, rng).samples[:, 0] + state.gamma * rng.standard_normal(10)
    result = semantic_sweep(model, x_t, state, 1, [-1.0, 0.0, 1.0], schedule, rng, steps=8)
    plain = reverse_sample(ground_truth_score(model), schedule, 8, x_init=x_t[:, None], t_start=0.5)[:, 0]
    np.testing.assert_array_equal(result.samples[1], plain)
    np.testing.assert_array_equal(result.control_samples[1], plain)
    assert np.linalg.norm(result.direction) == pytest.approx(1.0)
    assert np.linalg.norm(result.control_direction) == pytest.approx(1.0)
    assert result.direction[np.argmax(np.abs(result.direction))] > 0
    assert result.singular_value == pytest.approx(state.shrinkage)


def test_sweep_moves_energy_within_the_component(rng):
    n = 1000
    eye = np.eye(n)
    model = MoLRGModel(bases=(eye[:, :1], eye[:, 1:2]), weights=np.array([0.5, 0.5]), mutually_orthogonal=True)
    schedule = Schedule()
    state = evaluate(schedule, 0.5)
    alphas = [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0]
    result = semantic_sweep(model, 2.0 * eye[:, 0], state, 1, alphas, schedule, rng)
    assert result.direction[0] > 0.99

    def split(samples):
        return np.array([x[0] ** 2 - x[1] ** 2 for x in samples])

    along = split(result.samples)
    assert np.all(np.diff(along) > 0)
    assert np.ptp(split(result.control_samples)) < 0.1 * np.ptp(along)


def test_sweep_index_must_lie_within_rank(rng):
    model = random_model(rng, 10, 1, 3)
    schedule = Schedule()
    state = evaluate(schedule, 0.5)
    x_t = rng.standard_normal(10)
    for index in (0, 4):
        with pytest.raises(InvalidIndexError):
            semantic_sweep(model, x_t, state, index, [0.0], schedule, rng)


# concentration and invariants -----------------------------------------------

def test_concentration_violations_deterministic_case():
    d, N = 100, 1000
    coeffs = np.zeros((d, N))
    coeffs[0] = np.sqrt(d)
    norm_violations, cov_violated = concentration_violations(coeffs)
    assert norm_violations == 0
    assert cov_violated


def test_concentration_suite_passes(rng):
    report = concentration_suite(3, rng, N=2000, d=20)
    assert report.passed
    assert report.norm_violation_rate == 0.0


def test_invariant_suite_quick(rng):
    results = invariant_suite(rng, quick=True)
    assert len(results) == 7
    failed = [f"{r.name}: {r.detail}" for r in results if not r.passed]
    assert not failed


# acceptance-scale grids -----------------------------------------------------

@pytest.mark.slow
def test_pca_phase_transition_at_full_scale():
    d_values, N_values = list(range(2, 9)), list(range(2, 16))
    grid = phase_grid(ModelFamily(K=1, n=48), d_values, N_values, trials=20, method="pca", threads=4)
    for i, d in enumerate(d_values):
        for j, N in enumerate(N_values):
            if N >= d:
                assert grid.rates[i, j] == 1.0
            elif N <= d - 2:
                assert grid.rates[i, j] == 0.0
    for trial, _, _, d, N, distance, _ in grid.records:
        if N < d:
            assert distance >= np.sqrt(2 * min(d - N, 48 - d)) - 1e-6


@pytest.mark.slow
def test_ksubspaces_phase_transition():
    d_values, N_values = [2, 3, 4], [1, 2, 4, 6, 8]
    grid = phase_grid(ModelFamily(K=2, n=48), d_values, N_values, trials=20, method="ksubspaces",
                      restarts=10, threads=4)
    for i, d in enumerate(d_values):
        for j, N in enumerate(N_values):
            if N >= 2 * d:
                assert grid.rates[i, j] >= 0.95
            elif N < d:
                assert grid.rates[i, j] <= 0.05
