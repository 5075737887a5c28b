"""Forward-process schedules: scale s(t), noise level sigma(t) and loss weighting.

The perturbation kernel is x_t = s(t) x_0 + s(t) sigma(t) eps, so every other
module only needs the scalars (s, sigma, gamma = s*sigma) and the soft-max
temperature phi = s^2 / (2 gamma^2 (s^2 + gamma^2)).
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np

from .errors import DegenerateStateError, InvalidArgumentError


class ScheduleKind(str, Enum):
    VE_LINEAR = "ve_linear"
    VP = "vp"


class Weighting(str, Enum):
    UNIT = "unit"
    SNR = "snr"


@dataclass(frozen=True)
class ScheduleState:
    """Schedule scalars frozen at one time."""

    t: float
    s: float
    sigma: float
    gamma: float
    phi: float

    @classmethod
    def from_scale(cls, s: float, sigma: float, t: float = float("nan")) -> "ScheduleState":
        """Build a state directly from (s, sigma); gamma = 0 gives phi = inf."""
        if s <= 0 or sigma < 0:
            raise InvalidArgumentError(f"need s > 0 and sigma >= 0, got s={s}, sigma={sigma}")
        gamma = s * sigma
        if gamma > 0:
            phi = s * s / (2.0 * gamma * gamma * (s * s + gamma * gamma))
        else:
            phi = math.inf
        return cls(t=t, s=float(s), sigma=float(sigma), gamma=float(gamma), phi=float(phi))

    @property
    def shrinkage(self) -> float:
        """s / (s^2 + gamma^2), the scalar in front of every projection denoiser."""
        return self.s / (self.s * self.s + self.gamma * self.gamma)

    @property
    def snr(self) -> float:
        return math.inf if self.sigma == 0 else 1.0 / self.sigma

    def require_noise(self):
        """Raise unless gamma > 0 (soft-max weights and scores need it)."""
        if not self.gamma > 0:
            raise DegenerateStateError(f"gamma must be positive (t={self.t}, sigma={self.sigma})")


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind = ScheduleKind.VE_LINEAR
    sigma_min: float = 0.0
    sigma_max: float = 1.0
    vp_beta_min: float = 0.1
    vp_beta_max: float = 20.0
    lambda_kind: Weighting = Weighting.UNIT

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "lambda_kind", Weighting(self.lambda_kind))
        if self.sigma_min < 0:
            raise InvalidArgumentError("sigma_min must be nonnegative")
        if not self.sigma_min < self.sigma_max:
            raise InvalidArgumentError("sigma_min must be smaller than sigma_max")
        if self.vp_beta_min <= 0 or self.vp_beta_max < self.vp_beta_min:
            raise InvalidArgumentError("need 0 < vp_beta_min <= vp_beta_max")

    # VP integrated rate B(t) = int_0^t beta
    def _beta(self, t: float) -> float:
        return self.vp_beta_min + t * (self.vp_beta_max - self.vp_beta_min)

    def _beta_integral(self, t: float) -> float:
        return self.vp_beta_min * t + 0.5 * (self.vp_beta_max - self.vp_beta_min) * t * t

    def scale(self, t: float) -> float:
        if self.kind is ScheduleKind.VE_LINEAR:
            return 1.0
        return math.exp(-0.5 * self._beta_integral(t))

    def sigma(self, t: float) -> float:
        if self.kind is ScheduleKind.VE_LINEAR:
            return self.sigma_min + t * (self.sigma_max - self.sigma_min)
        return math.sqrt(math.expm1(self._beta_integral(t)))

    def drift(self, t: float) -> float:
        """f(t) = d log s / dt."""
        if self.kind is ScheduleKind.VE_LINEAR:
            return 0.0
        return -0.5 * self._beta(t)

    def diffusion_sq(self, t: float) -> float:
        """g(t)^2 = s^2 d(sigma^2)/dt."""
        if self.kind is ScheduleKind.VE_LINEAR:
            return 2.0 * self.sigma(t) * (self.sigma_max - self.sigma_min)
        return self._beta(t)

    def t_of_sigma(self, sigma: float) -> float:
        """Inverse of sigma(t) on [0, 1]."""
        if self.kind is ScheduleKind.VE_LINEAR:
            t = (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min)
        else:
            b = math.log1p(sigma * sigma)
            slope = self.vp_beta_max - self.vp_beta_min
            if slope == 0:
                t = b / self.vp_beta_min
            else:
                t = (-self.vp_beta_min + math.sqrt(self.vp_beta_min ** 2 + 2.0 * slope * b)) / slope
        return min(max(t, 0.0), 1.0)


def evaluate(schedule: Schedule, t: float) -> ScheduleState:
    """Evaluate (s, sigma, gamma, phi) at time t."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"time must lie in (0, 1], got {t}")
    s = schedule.scale(t)
    sigma = schedule.sigma(t)
    if sigma == 0:
        raise DegenerateStateError(f"noise level vanishes at t={t}; phi is undefined")
    return ScheduleState.from_scale(s, sigma, t=t)


def weighting(schedule: Schedule, t: float) -> float:
    """Loss weight lambda_t; SNR weighting is 1/(s^2 sigma^4)."""
    if schedule.lambda_kind is Weighting.UNIT:
        return 1.0
    state = evaluate(schedule, t)
    return 1.0 / (state.s ** 2 * state.sigma ** 4)


def time_grid(steps: int) -> List[float]:
    """Uniform grid k/steps, k = 1..steps (zero excluded)."""
    if steps < 1:
        raise InvalidArgumentError(f"steps must be at least 1, got {steps}")
    return [k / steps for k in range(1, steps + 1)]


def sampling_times(schedule: Schedule, steps: int, t_start: float = 1.0,
                   t_end: float = 1e-3, rho: float = 7.0) -> np.ndarray:
    """Decreasing times t_start = t_0 > ... > t_steps = t_end.

    Noise levels follow the polynomial spacing
    sigma_i = (sigma_a^(1/rho) + i/steps * (sigma_b^(1/rho) - sigma_a^(1/rho)))^rho,
    which packs steps near the data end where the flow is stiff.
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be at least 1, got {steps}")
    if not 0.0 < t_end < t_start <= 1.0:
        raise InvalidArgumentError(f"need 0 < t_end < t_start <= 1, got {t_end}, {t_start}")
    sigma_a = schedule.sigma(t_start) ** (1.0 / rho)
    sigma_b = schedule.sigma(t_end) ** (1.0 / rho)
    ramp = np.arange(steps + 1) / steps
    sigmas = (sigma_a + ramp * (sigma_b - sigma_a)) ** rho
    times = np.array([schedule.t_of_sigma(float(s)) for s in sigmas])
    times[0], times[-1] = t_start, t_end
    return times
