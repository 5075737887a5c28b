"""Low-rank denoising autoencoders, their Jacobians and numerical rank.

Denoisers share the call signature ``denoiser(x, state, x0=None)`` and work on
a vector or on a batch of columns. Only the hard-max denoiser reads ``x0``:
its component is chosen from the clean sample, not from the noisy input.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .errors import InvalidArgumentError, InvalidParamsError
from .molrg import (MoLRGModel, subspace_energies, log_offsets, mixture_projection, as_columns,
                    posterior_mean, restore)
from .schedule import ScheduleState

PARAM_TOL = 1e-8
DEFAULT_ETA = 0.99
DEFAULT_FD_STEP = 1e-4


@dataclass(frozen=True)
class DaeParams:
    """Learnable bases theta = {U_k}."""

    bases: Tuple[np.ndarray, ...]
    joint_orthonormal: bool = False

    def __post_init__(self):
        bases = tuple(np.array(U, dtype=float) for U in self.bases)
        for U in bases:
            U.setflags(write=False)
        object.__setattr__(self, "bases", bases)
        if not bases:
            raise InvalidParamsError("need at least one basis")
        n = bases[0].shape[0]
        for k, U in enumerate(bases):
            if U.ndim != 2 or U.shape[0] != n:
                raise InvalidParamsError(f"basis {k} has shape {U.shape}")
            if np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > PARAM_TOL:
                raise InvalidParamsError(f"basis {k} is not column-orthonormal")
        if self.joint_orthonormal:
            joint = self.concatenated()
            if np.linalg.norm(joint.T @ joint - np.eye(joint.shape[1])) > PARAM_TOL:
                raise InvalidParamsError("concatenated bases are not jointly orthonormal")

    @classmethod
    def from_model(cls, model: MoLRGModel) -> "DaeParams":
        return cls(bases=model.bases, joint_orthonormal=model.mutually_orthogonal)

    @property
    def n(self) -> int:
        return self.bases[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.bases)

    @property
    def dims(self) -> List[int]:
        return [U.shape[1] for U in self.bases]

    def concatenated(self) -> np.ndarray:
        return np.hstack(self.bases)


@dataclass
class RankReport:
    singular_values: np.ndarray
    numerical_rank: int
    eta: float
    snr: float = float("nan")
    t: float = float("nan")
    sigma: float = float("nan")
    trajectory: int = 0

    @property
    def n(self) -> int:
        return len(self.singular_values)

    @property
    def rank_ratio(self) -> float:
        return self.numerical_rank / self.n


def _check_orthonormal(U: np.ndarray):
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > PARAM_TOL:
        raise InvalidParamsError("basis columns are not orthonormal")
    return U


def dae_single(U: np.ndarray, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """s/(s^2+gamma^2) U U^T x; gamma = 0 is allowed and gives U U^T x / s."""
    U = _check_orthonormal(U)
    batch, single = as_columns(x)
    return restore(state.shrinkage * (U @ (U.T @ batch)), single)


def softmax_weights(params: DaeParams, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """w_k = softmax_k(phi ||U_k^T x||^2), shape (K,) or (K, m)."""
    state.require_noise()
    batch, single = as_columns(x)
    weights = softmax(state.phi * subspace_energies(params.bases, batch), axis=0)
    return weights[:, 0] if single else weights


def dae_softmax(params: DaeParams, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    batch, single = as_columns(x)
    weights = softmax_weights(params, batch, state)
    return restore(state.shrinkage * mixture_projection(params.bases, weights, batch), single)


def hardmax_weights(params: DaeParams, x0: np.ndarray) -> np.ndarray:
    """One-hot on argmax_k ||U_k^T x0||; ties go to the lowest index."""
    batch, single = as_columns(x0)
    winners = np.argmax(subspace_energies(params.bases, batch), axis=0)
    onehot = np.zeros((params.K, batch.shape[1]))
    onehot[winners, np.arange(batch.shape[1])] = 1.0
    return onehot[:, 0] if single else onehot


def dae_hardmax(params: DaeParams, x0: np.ndarray, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    if not params.joint_orthonormal:
        raise InvalidParamsError("hard-max denoiser needs jointly orthonormal bases")
    state.require_noise()
    batch, single = as_columns(x)
    clean, _ = as_columns(x0)
    if clean.shape != batch.shape:
        raise InvalidArgumentError("clean and noisy inputs must have the same shape")
    weights = hardmax_weights(params, clean)
    return restore(state.shrinkage * mixture_projection(params.bases, weights, batch), single)


class Denoiser:
    """Callable x_theta(x_t, t); subclasses pick the parameterization."""

    def __call__(self, x: np.ndarray, state: ScheduleState, x0: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, state: ScheduleState) -> np.ndarray:
        return jacobian_fd(lambda y: self(y, state), x)


class SingleDenoiser(Denoiser):

    def __init__(self, U: np.ndarray):
        self.U = _check_orthonormal(U)

    def __call__(self, x, state, x0=None):
        return dae_single(self.U, x, state)

    def jacobian(self, x, state):
        return state.shrinkage * (self.U @ self.U.T)


class SoftmaxDenoiser(Denoiser):

    def __init__(self, params: DaeParams):
        self.params = params

    def __call__(self, x, state, x0=None):
        return dae_softmax(self.params, x, state)

    def jacobian(self, x, state):
        return mixture_jacobian(self.params.bases, np.zeros(self.params.K), x, state)


class HardmaxDenoiser(Denoiser):
    """Falls back to soft-max weights when no clean sample is available."""

    def __init__(self, params: DaeParams):
        self.params = params

    def __call__(self, x, state, x0=None):
        if x0 is None:
            return dae_softmax(self.params, x, state)
        return dae_hardmax(self.params, x0, x, state)

    def jacobian(self, x, state):
        return mixture_jacobian(self.params.bases, np.zeros(self.params.K), x, state)


class PosteriorDenoiser(Denoiser):
    """The ground-truth posterior mean of a MoLRG model."""

    def __init__(self, model: MoLRGModel):
        self.model = model

    def __call__(self, x, state, x0=None):
        return posterior_mean(self.model, x, state)

    def jacobian(self, x, state):
        return jacobian_analytic_gt(self.model, x, state)


def jacobian_fd(dae: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central differences; column j is (f(x + h e_j) - f(x - h e_j)) / 2h.

    ``dae`` must accept a batch of columns.
    """
    if not h > 0:
        raise InvalidArgumentError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    steps = h * np.eye(x.shape[0])
    forward = dae(x[:, None] + steps)
    backward = dae(x[:, None] - steps)
    return (forward - backward) / (2.0 * h)


def mixture_jacobian(bases: Sequence[np.ndarray], offsets: np.ndarray,
                     x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """Jacobian of c sum_k w_k P_k x with w = softmax(phi x^T P_k x + offsets).

    J = c [sum_k w_k P_k + 2 phi (sum_k w_k P_k x x^T P_k - m m^T)],
    m = sum_k w_k P_k x, c = s/(s^2+gamma^2). The matrix is symmetric.
    """
    state.require_noise()
    x = np.asarray(x, dtype=float)
    projections = [U @ (U.T @ x) for U in bases]
    logits = state.phi * np.array([p @ x for p in projections]) + offsets
    weights = softmax(logits)
    m = sum(w * p for w, p in zip(weights, projections))
    jac = -np.outer(m, m) * (2.0 * state.phi)
    for U, w, p in zip(bases, weights, projections):
        jac += w * (U @ U.T) + (2.0 * state.phi * w) * np.outer(p, p)
    return state.shrinkage * jac


def jacobian_analytic_gt(model: MoLRGModel, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """Closed-form Jacobian of the ground-truth posterior mean."""
    return mixture_jacobian(model.bases, log_offsets(model, state), x, state)


def numerical_rank(J: np.ndarray, eta: float = DEFAULT_ETA) -> RankReport:
    """Smallest r whose leading squared singular values exceed an eta^2 energy share."""
    if not 0.0 < eta < 1.0:
        raise InvalidArgumentError(f"eta must lie in (0, 1), got {eta}")
    values = np.linalg.svd(np.asarray(J, dtype=float), compute_uv=False)
    energy = values ** 2
    total = energy.sum()
    if total == 0:
        return RankReport(singular_values=values, numerical_rank=0, eta=eta)
    share = np.cumsum(energy) / total
    above = np.nonzero(share > eta ** 2)[0]
    # rounding can keep the last share just below eta^2 when eta is near 1
    rank = int(above[0]) + 1 if above.size else int(np.count_nonzero(values))
    return RankReport(singular_values=values, numerical_rank=rank, eta=eta)

