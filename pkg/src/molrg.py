"""Mixture of low-rank Gaussians: the ground-truth data model.

A sample from component k is U_k a with a ~ N(0, I_{d_k}); the noisy variant
adds a perturbation e of exact norm delta. Closed forms for the diffused
density, the posterior mean E[x_0 | x_t] and the score live here.

All vector-valued functions accept a single vector of shape (n,) or a batch
of column vectors of shape (n, m) and return the matching shape.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InfeasibleDimsError, InvalidArgumentError
from .schedule import ScheduleState

ORTHO_TOL = 1e-10
WEIGHT_TOL = 1e-12


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Thin QR with the sign convention diag(R) >= 0, so the result is unique."""
    q, r = np.linalg.qr(matrix)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def as_columns(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    """View x as an (n, m) batch; the flag says whether x was a single vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a vector or a matrix of columns, got shape {x.shape}")
    return x, False


def restore(batch: np.ndarray, single: bool) -> np.ndarray:
    return batch[:, 0] if single else batch


@dataclass(frozen=True)
class MoLRGModel:
    """Ground-truth mixture: weights pi_k and orthonormal bases U_k (n x d_k)."""

    bases: Tuple[np.ndarray, ...]
    weights: np.ndarray
    mutually_orthogonal: bool = False

    def __post_init__(self):
        bases = tuple(np.asarray(U, dtype=float) for U in self.bases)
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "weights", weights)

        if not bases:
            raise InvalidArgumentError("a mixture needs at least one component")
        n = bases[0].shape[0]
        for k, U in enumerate(bases):
            if U.ndim != 2 or U.shape[0] != n or U.shape[1] < 1:
                raise InvalidArgumentError(f"basis {k} has shape {U.shape}, expected ({n}, d)")
            if np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > ORTHO_TOL:
                raise InvalidArgumentError(f"basis {k} is not column-orthonormal")
        if weights.shape != (len(bases),):
            raise InvalidArgumentError("need one mixing weight per component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise InvalidArgumentError("mixing weights must be nonnegative and sum to one")
        if self.mutually_orthogonal:
            if sum(self.dims) > n:
                raise InfeasibleDimsError(f"sum of dims {sum(self.dims)} exceeds n={n}")
            for k in range(len(bases)):
                for l in range(k + 1, len(bases)):
                    if np.linalg.norm(bases[k].T @ bases[l]) > ORTHO_TOL:
                        raise InvalidArgumentError(f"bases {k} and {l} are not orthogonal")

    @property
    def n(self) -> int:
        return self.bases[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.bases)

    @property
    def dims(self) -> List[int]:
        return [U.shape[1] for U in self.bases]


@dataclass
class Dataset:
    """Training samples x_i = U_{label_i} a_i + e_i stored as columns."""

    samples: np.ndarray
    labels: np.ndarray
    noises: np.ndarray
    coeffs: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.noises = np.asarray(self.noises, dtype=float)
        self.coeffs = [np.asarray(a, dtype=float) for a in self.coeffs]
        if self.samples.ndim != 2 or self.samples.shape[1] != self.labels.shape[0]:
            raise InvalidArgumentError("sample columns and labels disagree in count")
        if self.noises.shape != self.samples.shape:
            raise InvalidArgumentError("noise matrix must match the sample matrix")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def N(self) -> int:
        return self.samples.shape[1]

    def counts(self, K: int) -> np.ndarray:
        """N_k for every component."""
        return np.bincount(self.labels, minlength=K)


def _expand_dims(K: int, dims: Union[int, Sequence[int]]) -> List[int]:
    if np.isscalar(dims):
        dims = [int(dims)] * K
    dims = [int(d) for d in dims]
    if len(dims) != K:
        raise InvalidArgumentError(f"got {len(dims)} dims for K={K} components")
    if any(d < 1 for d in dims):
        raise InvalidArgumentError("every component needs dimension at least 1")
    return dims


def random_model(rng: np.random.Generator, n: int, K: int,
                 dims: Union[int, Sequence[int]], mutually_orthogonal: bool = False) -> MoLRGModel:
    """Draw orthonormal bases from Gaussian matrices; uniform mixing weights."""
    dims = _expand_dims(K, dims)
    if max(dims) > n:
        raise InfeasibleDimsError(f"component dimension {max(dims)} exceeds n={n}")
    if mutually_orthogonal:
        if sum(dims) > n:
            raise InfeasibleDimsError(f"sum of dims {sum(dims)} exceeds n={n}")
        joint = orthonormalize(rng.standard_normal((n, sum(dims))))
        bounds = np.cumsum([0] + dims)
        bases = [joint[:, bounds[k]:bounds[k + 1]] for k in range(K)]
    else:
        bases = [orthonormalize(rng.standard_normal((n, d))) for d in dims]
    return MoLRGModel(bases=tuple(bases), weights=np.full(K, 1.0 / K),
                      mutually_orthogonal=mutually_orthogonal)


def sample_dataset(model: MoLRGModel, N: int, noise_level: float,
                   rng: np.random.Generator, balanced: bool = False) -> Dataset:
    """Draw N samples; each noise vector has norm exactly noise_level.

    With balanced=True every component receives N // K samples (N must be a
    multiple of K) in shuffled order instead of i.i.d. labels.
    """
    if N < 1:
        raise InvalidArgumentError(f"need at least one sample, got N={N}")
    if noise_level < 0:
        raise InvalidArgumentError("noise level must be nonnegative")
    K = model.K
    if balanced:
        if N % K:
            raise InvalidArgumentError(f"balanced sampling needs N divisible by K={K}")
        labels = rng.permutation(np.repeat(np.arange(K), N // K))
    else:
        labels = rng.choice(K, size=N, p=model.weights)

    samples = np.empty((model.n, N))
    coeffs = []
    for i, k in enumerate(labels):
        a = rng.standard_normal(model.dims[k])
        coeffs.append(a)
        samples[:, i] = model.bases[k] @ a

    noises = np.zeros((model.n, N))
    if noise_level > 0:
        directions = rng.standard_normal((model.n, N))
        noises = noise_level * directions / np.linalg.norm(directions, axis=0)
        samples += noises
    return Dataset(samples=samples, labels=labels, noises=noises, coeffs=coeffs)


def forward_perturb(x0: np.ndarray, state: ScheduleState, rng: np.random.Generator) -> np.ndarray:
    """x_t = s x0 + gamma eps with eps ~ N(0, I)."""
    x0 = np.asarray(x0, dtype=float)
    return state.s * x0 + state.gamma * rng.standard_normal(x0.shape)


def subspace_energies(bases: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """||U_k^T x||^2 as a (K, m) array for a batch x of shape (n, m)."""
    return np.stack([np.sum((U.T @ x) ** 2, axis=0) for U in bases])


def log_offsets(model: MoLRGModel, state: ScheduleState) -> np.ndarray:
    """Per-component offsets log pi_k - d_k/2 log(1 + s^2/gamma^2).

    The second term is the component's log-determinant contribution; it is the
    same for every k when the dimensions agree.
    """
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.weights)
    dims = np.asarray(model.dims, dtype=float)
    return log_pi - 0.5 * dims * np.log1p(state.s ** 2 / state.gamma ** 2)


def posterior_weights(model: MoLRGModel, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """Posterior component probabilities, shape (K,) or (K, m)."""
    state.require_noise()
    batch, single = as_columns(x)
    logits = state.phi * subspace_energies(model.bases, batch) + log_offsets(model, state)[:, None]
    weights = softmax(logits, axis=0)
    return weights[:, 0] if single else weights


def mixture_projection(bases: Sequence[np.ndarray], weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_k w_k U_k U_k^T x for a batch."""
    out = np.zeros_like(x)
    for U, w in zip(bases, weights):
        out += (U @ (U.T @ x)) * w
    return out


def posterior_mean(model: MoLRGModel, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """E[x_0 | x_t = x]: shrunk, posterior-weighted projections onto the subspaces."""
    batch, single = as_columns(x)
    weights = posterior_weights(model, batch, state)
    mean = state.shrinkage * mixture_projection(model.bases, weights, batch)
    return restore(mean, single)


def score_gt(model: MoLRGModel, x: np.ndarray, state: ScheduleState) -> np.ndarray:
    """grad log p_t(x) = -(x - s^2/(s^2+gamma^2) sum_k w_k U_k U_k^T x) / gamma^2."""
    batch, single = as_columns(x)
    weights = posterior_weights(model, batch, state)
    coef = state.s ** 2 / (state.s ** 2 + state.gamma ** 2)
    score = -(batch - coef * mixture_projection(model.bases, weights, batch)) / state.gamma ** 2
    return restore(score, single)


def log_pdf_t(model: MoLRGModel, x: np.ndarray, state: ScheduleState) -> Union[float, np.ndarray]:
    """log p_t(x) through the structured inverse and log-determinant of each component."""
    state.require_noise()
    batch, single = as_columns(x)
    s2, g2 = state.s ** 2, state.gamma ** 2
    n = model.n
    dims = np.asarray(model.dims, dtype=float)

    sq_norm = np.sum(batch ** 2, axis=0)
    quad = (sq_norm[None, :] - s2 / (s2 + g2) * subspace_energies(model.bases, batch)) / g2
    log_det = dims * np.log(s2 + g2) + (n - dims) * np.log(g2)
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.weights)
    log_comp = log_pi[:, None] - 0.5 * (n * np.log(2 * np.pi) + log_det[:, None] + quad)
    out = logsumexp(log_comp, axis=0)
    return float(out[0]) if single else out
