import math

import numpy as np
import pytest
from scipy.integrate import quad

from src.errors import DegenerateStateError, InvalidArgumentError
from src.schedule import (Schedule, ScheduleKind, ScheduleState, Weighting, evaluate, sampling_times,
                          time_grid, weighting)


def test_ve_at_one():
    state = evaluate(Schedule(), 1.0)
    assert (state.s, state.sigma, state.gamma) == (1.0, 1.0, 1.0)
    assert state.phi == pytest.approx(0.25)


def test_ve_midpoint_with_wide_range():
    state = evaluate(Schedule(sigma_max=10.0), 0.5)
    assert state.sigma == pytest.approx(5.0)
    assert state.gamma == pytest.approx(5.0)
    assert state.phi == pytest.approx(1.0 / 1300.0)


def test_vp_matches_quadrature(vp):
    beta = lambda u: 0.1 + u * (20.0 - 0.1)
    integral, _ = quad(beta, 0.0, 0.5)
    s = math.exp(-0.5 * integral)
    # sigma^2 = int g^2 / s^2 with g^2 = beta and s(u)^2 = exp(-B(u))
    sigma_sq, _ = quad(lambda u: beta(u) * math.exp(quad(beta, 0.0, u)[0]), 0.0, 0.5)
    state = evaluate(vp, 0.5)
    assert state.s == pytest.approx(s, rel=1e-10)
    assert state.sigma == pytest.approx(math.sqrt(sigma_sq), rel=1e-8)


def test_vp_preserves_variance(vp):
    for t in (0.01, 0.3, 1.0):
        state = evaluate(vp, t)
        assert state.s ** 2 + state.gamma ** 2 == pytest.approx(1.0, rel=1e-12)


def test_degenerate_and_out_of_range_times():
    with pytest.raises(DegenerateStateError):
        evaluate(Schedule(), 0.0)
    with pytest.raises(InvalidArgumentError):
        evaluate(Schedule(), 1.5)
    with pytest.raises(InvalidArgumentError):
        evaluate(Schedule(), -0.1)


def test_invalid_schedules():
    with pytest.raises(InvalidArgumentError):
        Schedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(InvalidArgumentError):
        Schedule(sigma_min=-0.1)
    with pytest.raises(ValueError):
        Schedule(kind="cosine")


def test_state_without_noise():
    state = ScheduleState.from_scale(1.0, 0.0)
    assert state.phi == math.inf
    assert state.shrinkage == 1.0
    with pytest.raises(DegenerateStateError):
        state.require_noise()


@pytest.mark.parametrize("kind", [ScheduleKind.VE_LINEAR, ScheduleKind.VP])
def test_drift_and_diffusion_are_derivatives(kind):
    schedule = Schedule(kind=kind, sigma_min=0.1, sigma_max=3.0)
    t, h = 0.4, 1e-6
    dlog_s = (math.log(schedule.scale(t + h)) - math.log(schedule.scale(t - h))) / (2 * h)
    dsigma_sq = (schedule.sigma(t + h) ** 2 - schedule.sigma(t - h) ** 2) / (2 * h)
    assert schedule.drift(t) == pytest.approx(dlog_s, abs=1e-6)
    assert schedule.diffusion_sq(t) == pytest.approx(schedule.scale(t) ** 2 * dsigma_sq, rel=1e-6)


@pytest.mark.parametrize("kind", [ScheduleKind.VE_LINEAR, ScheduleKind.VP])
def test_t_of_sigma_inverts_sigma(kind):
    schedule = Schedule(kind=kind)
    for t in (0.05, 0.5, 0.9):
        assert schedule.t_of_sigma(schedule.sigma(t)) == pytest.approx(t, rel=1e-10)


def test_weighting():
    assert weighting(Schedule(), 0.3) == 1.0
    assert weighting(Schedule(lambda_kind=Weighting.SNR), 1.0) == pytest.approx(1.0)
    assert weighting(Schedule(sigma_max=10.0, lambda_kind="snr"), 0.5) == pytest.approx(0.0016)


def test_time_grid():
    assert time_grid(1) == [1.0]
    assert time_grid(4) == [0.25, 0.5, 0.75, 1.0]
    grid = time_grid(64)
    assert len(grid) == 64 and grid[0] == 1 / 64 and grid[-1] == 1.0
    with pytest.raises(InvalidArgumentError):
        time_grid(0)


def test_sampling_times_are_decreasing(vp):
    times = sampling_times(vp, 18)
    assert len(times) == 19
    assert times[0] == 1.0 and times[-1] == 1e-3
    assert np.all(np.diff(times) < 0)
    with pytest.raises(InvalidArgumentError):
        sampling_times(vp, 0)
