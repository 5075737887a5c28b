"""Training losses, SGD for the subspace denoisers and the closed-form oracles.

The oracles are the problems training is equivalent to: PCA for a single
low-rank Gaussian and K-subspaces clustering for a mixture. Recovery is
scored with the projector distance ||U U^T - V V^T||_F.
"""

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import null_space
from scipy.special import softmax

from .dae import (DaeParams, Denoiser, HardmaxDenoiser, SingleDenoiser, SoftmaxDenoiser,
                  hardmax_weights)
from .errors import (InvalidArgumentError, TrainingDivergedError, UnsupportedScheduleError)
from .logger import logger
from .molrg import Dataset, MoLRGModel, orthonormalize, subspace_energies
from .schedule import Schedule, ScheduleState, evaluate, time_grid, weighting

SUCCESS_THRESHOLD = 0.5
MAX_EXHAUSTIVE_K = 6
MAX_CHUNK_COLUMNS = 1 << 16


class Parameterization(str, Enum):
    SINGLE = "single"
    SOFTMAX = "softmax"
    HARDMAX = "hardmax"


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings; the step size is multiplied by ``lr_decay`` every ``decay_every`` iterations."""

    learning_rate: float = 1e-4
    batch: int = 128
    iters: int = 10_000
    time_steps: int = 64
    init_perturb: float = 0.2
    seed: int = 0
    shared_noise: bool = False
    log_every: int = 100
    lr_decay: float = 1.0
    decay_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.batch < 1 or self.time_steps < 1 or self.log_every < 1:
            raise InvalidArgumentError("batch, time_steps and log_every must be positive")
        if self.iters < 0 or self.init_perturb < 0 or self.decay_every < 0:
            raise InvalidArgumentError("iters, init_perturb and decay_every must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise InvalidArgumentError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")

    @classmethod
    def defaults_for(cls, K: int, samples_per_component: int, **overrides) -> "TrainConfig":
        """Per-K defaults; ``None`` overrides are ignored.

        K = 1 starts from a random basis: lr 4e-2 halved every 250 steps, batch
        128 N_k, 2000 iterations. K > 1 starts from a perturbed ground truth:
        lr 2e-5, batch 1024, 1e5 iterations.
        """
        if K == 1:
            base = cls(learning_rate=4e-2, batch=128 * max(1, samples_per_component), iters=2_000,
                       lr_decay=0.5, decay_every=250)
        else:
            base = cls(learning_rate=2e-5, batch=1024, iters=100_000)
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})

    def learning_rate_at(self, iteration: int) -> float:
        if self.decay_every == 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (iteration // self.decay_every)


@dataclass
class RecoveryReport:
    permutation: Tuple[int, ...]
    distances: np.ndarray
    mean_distance: float
    success: bool
    approximate: bool = False


class LossEstimate(NamedTuple):
    value: float
    stderr: float


@dataclass
class KSubspacesResult:
    params: DaeParams
    labels: np.ndarray
    objective: float
    history: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses

def as_denoiser(params_or_dae: Union[Denoiser, DaeParams, np.ndarray]) -> Denoiser:
    if isinstance(params_or_dae, Denoiser):
        return params_or_dae
    if isinstance(params_or_dae, DaeParams):
        if params_or_dae.K == 1:
            return SingleDenoiser(params_or_dae.bases[0])
        return SoftmaxDenoiser(params_or_dae)
    return SingleDenoiser(np.asarray(params_or_dae, dtype=float))


def make_denoiser(params: DaeParams, parameterization: Parameterization) -> Denoiser:
    parameterization = Parameterization(parameterization)
    if parameterization is Parameterization.SINGLE:
        return SingleDenoiser(params.bases[0])
    if parameterization is Parameterization.HARDMAX:
        return HardmaxDenoiser(params)
    return SoftmaxDenoiser(params)


def _perturbed_batches(samples: np.ndarray, schedule: Schedule, mc_draws: int,
                       rng: np.random.Generator, time_steps: int
                       ) -> Iterator[Tuple[float, ScheduleState, int, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (t, state, first_draw, x0, x_t, eps) chunks; columns are draw-major."""
    if mc_draws < 1:
        raise InvalidArgumentError(f"mc_draws must be at least 1, got {mc_draws}")
    n, N = samples.shape
    per_chunk = max(1, MAX_CHUNK_COLUMNS // N)
    for t in time_grid(time_steps):
        state = evaluate(schedule, t)
        for first in range(0, mc_draws, per_chunk):
            m = min(per_chunk, mc_draws - first)
            x0 = np.tile(samples, m)
            eps = rng.standard_normal((n, N * m))
            yield t, state, first, x0, state.s * x0 + state.gamma * eps, eps


def _accumulate(per_draw: np.ndarray, first: int, column_losses: np.ndarray, N: int, scale: float):
    m = column_losses.shape[0] // N
    per_draw[first:first + m] += scale * column_losses.reshape(m, N).mean(axis=1)


def _estimate(per_draw: np.ndarray) -> LossEstimate:
    if per_draw.shape[0] < 2:
        return LossEstimate(float(per_draw.mean()), float("inf"))
    return LossEstimate(float(per_draw.mean()), float(per_draw.std(ddof=1) / np.sqrt(per_draw.shape[0])))


def loss_mc_estimate(params_or_dae, dataset: Dataset, schedule: Schedule, mc_draws: int,
                     rng: np.random.Generator, time_steps: int = 64) -> LossEstimate:
    """Monte-Carlo estimate of the denoising loss with its standard error.

    The time integral is the Riemann sum over the uniform grid; each draw uses
    fresh Gaussian noise for every (sample, time) pair.
    """
    denoiser = as_denoiser(params_or_dae)
    dt = 1.0 / time_steps
    per_draw = np.zeros(mc_draws)
    for t, state, first, x0, xt, _ in _perturbed_batches(dataset.samples, schedule, mc_draws, rng, time_steps):
        residual = denoiser(xt, state, x0=x0) - x0
        _accumulate(per_draw, first, np.sum(residual ** 2, axis=0), dataset.N,
                    dt * weighting(schedule, t))
    return _estimate(per_draw)


def loss_mc(params_or_dae, dataset: Dataset, schedule: Schedule, mc_draws: int,
            rng: np.random.Generator, time_steps: int = 64) -> float:
    return loss_mc_estimate(params_or_dae, dataset, schedule, mc_draws, rng, time_steps).value


def score_matching_loss(params_or_dae, dataset: Dataset, schedule: Schedule, mc_draws: int,
                        rng: np.random.Generator, time_steps: int = 64,
                        xi: Optional[Callable[[float], float]] = None) -> float:
    """Denoising score matching with the score read off the denoiser by Tweedie.

    The default weight xi_t = s^2 sigma^4 lambda_t makes this equal to the
    denoising loss draw by draw.
    """
    denoiser = as_denoiser(params_or_dae)
    dt = 1.0 / time_steps
    per_draw = np.zeros(mc_draws)
    for t, state, first, x0, xt, eps in _perturbed_batches(dataset.samples, schedule, mc_draws, rng, time_steps):
        state.require_noise()
        weight = xi(t) if xi is not None else state.s ** 2 * state.sigma ** 4 * weighting(schedule, t)
        model_score = (state.s * denoiser(xt, state, x0=x0) - xt) / state.gamma ** 2
        target = -eps / state.gamma
        _accumulate(per_draw, first, np.sum((model_score - target) ** 2, axis=0), dataset.N, dt * weight)
    return float(per_draw.mean())


def loss_closed_single(U: np.ndarray, dataset: Dataset, schedule: Schedule, time_steps: int = 64) -> float:
    """Exact expected loss of the single-subspace denoiser for schedules with s = 1.

    Per sample and time: ||x||^2 - (1+2 sigma^2)/(1+sigma^2)^2 ||U^T x||^2 + sigma^2 d/(1+sigma^2)^2.
    """
    U = np.asarray(U, dtype=float)
    d = U.shape[1]
    sq_norm = np.sum(dataset.samples ** 2, axis=0)
    captured = np.sum((U.T @ dataset.samples) ** 2, axis=0)
    total = 0.0
    for t in time_grid(time_steps):
        state = evaluate(schedule, t)
        if state.s != 1.0:
            raise UnsupportedScheduleError("closed-form single-subspace loss needs s(t) = 1")
        v = state.sigma ** 2
        per_sample = sq_norm - (1 + 2 * v) / (1 + v) ** 2 * captured + v * d / (1 + v) ** 2
        total += weighting(schedule, t) * per_sample.mean() / time_steps
    return float(total)


# ---------------------------------------------------------------------------
# stochastic gradient descent

def minibatch_gradient(bases: Sequence[np.ndarray], parameterization: Parameterization,
                       x0: np.ndarray, xt: np.ndarray, shrink: np.ndarray, phi: np.ndarray,
                       lam: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Weighted mean of ||x_theta(x_t) - x0||^2 over the batch columns and its gradient.

    ``shrink``, ``phi`` and ``lam`` hold s/(s^2+gamma^2), phi_t and lambda_t per column.
    Hard-max assignments are held fixed inside the step.
    """
    parameterization = Parameterization(parameterization)
    M = x0.shape[1]
    projections = [U @ (U.T @ xt) for U in bases]

    if parameterization is Parameterization.SINGLE or len(bases) == 1:
        weights = np.ones((1, M))
    elif parameterization is Parameterization.HARDMAX:
        weights = hardmax_weights(DaeParams(bases=tuple(bases)), x0)
    else:
        weights = softmax(phi[None, :] * subspace_energies(bases, xt), axis=0)

    output = shrink * sum(w * p for w, p in zip(weights, projections))
    residual = output - x0
    loss = float(np.mean(lam * np.sum(residual ** 2, axis=0)))

    scale = lam / M
    softmax_path = parameterization is Parameterization.SOFTMAX and len(bases) > 1
    if softmax_path:
        g = 2.0 * shrink * np.stack([np.sum(residual * p, axis=0) for p in projections])
        g_bar = np.sum(weights * g, axis=0)

    grads = []
    for k, U in enumerate(bases):
        alpha = 2.0 * shrink * weights[k] * scale
        xt_U = xt.T @ U
        grad = (residual * alpha) @ xt_U + (xt * alpha) @ (residual.T @ U)
        if softmax_path:
            beta = 2.0 * phi * weights[k] * (g[k] - g_bar) * scale
            grad += (xt * beta) @ xt_U
        grads.append(grad)
    return loss, grads


def retract(bases: Sequence[np.ndarray], joint: bool) -> List[np.ndarray]:
    """QR retraction with positive diagonal; joint retraction keeps blocks mutually orthogonal."""
    if not joint:
        return [orthonormalize(U) for U in bases]
    q = orthonormalize(np.hstack(bases))
    bounds = np.cumsum([0] + [U.shape[1] for U in bases])
    return [q[:, bounds[k]:bounds[k + 1]] for k in range(len(bases))]


def initial_bases(n: int, dims: Sequence[int], rng: np.random.Generator,
                  model_for_init: Optional[MoLRGModel] = None, perturb: float = 0.2) -> List[np.ndarray]:
    """U_k^0 = orthonormalize(U_k* + perturb * Delta), or random orthonormal without a model."""
    if model_for_init is not None:
        if list(model_for_init.dims) != list(dims):
            raise InvalidArgumentError("initialization model dims do not match the requested dims")
        start = [U + perturb * rng.standard_normal(U.shape) for U in model_for_init.bases]
    else:
        start = [rng.standard_normal((n, sum(dims)))]
        bounds = np.cumsum([0] + list(dims))
        start = [start[0][:, bounds[k]:bounds[k + 1]] for k in range(len(dims))]
    return retract(start, joint=len(dims) > 1)


def sgd_train(dataset: Dataset, config: TrainConfig, model_for_init: Optional[MoLRGModel] = None,
              K: int = 1, dims: Optional[Sequence[int]] = None,
              parameterization: Parameterization = Parameterization.SINGLE,
              schedule: Optional[Schedule] = None,
              callback: Optional[Callable[[int, DaeParams, float, float], None]] = None) -> DaeParams:
    """Plain minibatch SGD on the denoising loss, retracted to orthonormal bases.

    Each iteration draws M (sample, time, eps) triples; with ``shared_noise``
    one eps serves the whole batch, which keeps the gradient noise from
    averaging out over the batch. ``callback(iteration, params, loss,
    grad_norm)`` runs every ``log_every`` iterations and after the last one.
    """
    parameterization = Parameterization(parameterization)
    schedule = schedule or Schedule()
    if dims is None:
        if model_for_init is None:
            raise InvalidArgumentError("need dims or an initialization model")
        dims = model_for_init.dims
    dims = [int(d) for d in (dims if not np.isscalar(dims) else [dims] * K)]
    if len(dims) != K:
        raise InvalidArgumentError(f"got {len(dims)} dims for K={K}")
    if parameterization is Parameterization.SINGLE and K != 1:
        raise InvalidArgumentError("single-subspace parameterization needs K = 1")
    n, N = dataset.n, dataset.N
    if sum(dims) > n and K > 1:
        raise InvalidArgumentError(f"sum of dims {sum(dims)} exceeds n={n}")

    rng = np.random.default_rng(config.seed)
    joint = K > 1
    bases = initial_bases(n, dims, rng, model_for_init, config.init_perturb)

    states = [evaluate(schedule, t) for t in time_grid(config.time_steps)]
    s_grid = np.array([st.s for st in states])
    gamma_grid = np.array([st.gamma for st in states])
    shrink_grid = np.array([st.shrinkage for st in states])
    phi_grid = np.array([st.phi for st in states])
    lam_grid = np.array([weighting(schedule, st.t) for st in states])

    logger.info(f"SGD ({parameterization.value}): K={K}, dims={dims}, N={N}, "
                f"lr={config.learning_rate:g} (x{config.lr_decay:g} every {config.decay_every or '-'}), "
                f"batch={config.batch}, iters={config.iters}")
    M = config.batch
    for iteration in range(config.iters + 1):
        picks = rng.integers(N, size=M)
        slots = rng.integers(len(states), size=M)
        if config.shared_noise:
            eps = rng.standard_normal((n, 1))
        else:
            eps = rng.standard_normal((n, M))
        x0 = dataset.samples[:, picks]
        xt = s_grid[slots] * x0 + gamma_grid[slots] * eps

        loss, grads = minibatch_gradient(bases, parameterization, x0, xt, shrink_grid[slots],
                                         phi_grid[slots], lam_grid[slots])
        grad_norm = float(np.sqrt(sum(np.sum(g ** 2) for g in grads)))
        if not (np.isfinite(loss) and np.isfinite(grad_norm)):
            raise TrainingDivergedError(iteration)

        if callback is not None and (iteration % config.log_every == 0 or iteration == config.iters):
            callback(iteration, DaeParams(bases=tuple(bases), joint_orthonormal=joint), loss, grad_norm)
        if iteration % max(1, config.iters // 10 or 1) == 0:
            logger.debug(f"iter {iteration}: loss={loss:.6g}, grad_norm={grad_norm:.3g}")
        if iteration == config.iters:
            break

        lr = config.learning_rate_at(iteration)
        bases = retract([U - lr * g for U, g in zip(bases, grads)], joint)
        if not all(np.all(np.isfinite(U)) for U in bases):
            raise TrainingDivergedError(iteration)

    logger.info(f"SGD finished: final batch loss {loss:.6g}")
    return DaeParams(bases=tuple(bases), joint_orthonormal=joint)


# ---------------------------------------------------------------------------
# oracles

def _samples_of(data: Union[Dataset, np.ndarray]) -> np.ndarray:
    return data.samples if isinstance(data, Dataset) else np.asarray(data, dtype=float)


def _numerical_rank(values: np.ndarray, shape: Tuple[int, int]) -> int:
    if values.size == 0 or values[0] == 0:
        return 0
    return int(np.sum(values > values[0] * max(shape) * np.finfo(float).eps))


def pca_oracle(data: Union[Dataset, np.ndarray], d: int, avoid: Optional[np.ndarray] = None) -> np.ndarray:
    """Top-d left singular vectors of the sample matrix.

    When the samples span fewer than d directions the basis is completed with
    an orthonormal complement; ``avoid`` forces the completion to stay
    orthogonal to a reference subspace where room permits, which gives the
    worst optimal solution.
    """
    X = _samples_of(data)
    n = X.shape[0]
    if d > n or d < 1:
        raise InvalidArgumentError(f"target dimension {d} must lie in [1, {n}]")
    U_full, values, _ = np.linalg.svd(X, full_matrices=True)
    rank = _numerical_rank(values, X.shape)
    if rank >= d:
        return U_full[:, :d]

    top = U_full[:, :rank]
    if avoid is None:
        return U_full[:, :d]
    need = d - rank
    fill = null_space(np.hstack([top, np.asarray(avoid, dtype=float)]).T)[:, :need]
    if fill.shape[1] < need:
        extra = null_space(np.hstack([top, fill]).T)[:, :need - fill.shape[1]]
        fill = np.hstack([fill, extra])
    return np.hstack([top, fill])


def subspace_distance(U: np.ndarray, V: np.ndarray) -> float:
    """||U U^T - V V^T||_F for orthonormal U, V of equal width.

    Computed as sqrt(||V - U U^T V||_F^2 + ||U - V V^T U||_F^2), which is
    symmetric in U and V and keeps full precision near zero.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.shape != V.shape:
        raise InvalidArgumentError(f"shape mismatch: {U.shape} vs {V.shape}")
    return float(np.hypot(np.linalg.norm(V - U @ (U.T @ V)), np.linalg.norm(U - V @ (V.T @ U))))


def _complement(others: List[np.ndarray], n: int) -> Optional[np.ndarray]:
    if not others:
        return None
    return null_space(np.hstack(others).T)


def _fit_block(members: np.ndarray, complement: Optional[np.ndarray], d: int) -> np.ndarray:
    """Top-d principal directions of the members inside the complement of the other blocks."""
    if complement is None:
        return np.linalg.svd(members, full_matrices=True)[0][:, :d]
    local = np.linalg.svd(complement.T @ members, full_matrices=True)[0][:, :d]
    return complement @ local


def _assign(bases: Sequence[np.ndarray], X: np.ndarray) -> Tuple[np.ndarray, float]:
    energies = subspace_energies(bases, X)
    labels = np.argmax(energies, axis=0)
    return labels, float(energies.max(axis=0).mean())


def _seed_bases(X: np.ndarray, K: int, d: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Grow one block per component around a random anchor and its nearest-angle neighbours.

    Anchors after the first are drawn with probability proportional to the
    energy the current blocks leave unexplained.
    """
    n, N = X.shape
    norms = np.linalg.norm(X, axis=0)
    unit = X / np.where(norms > 0, norms, 1.0)
    residual = norms ** 2
    bases: List[np.ndarray] = []
    for _ in range(K):
        total = residual.sum()
        probs = residual / total if total > 0 else np.full(N, 1.0 / N)
        anchor = rng.choice(N, p=probs)
        closeness = np.abs(unit.T @ unit[:, anchor])
        closeness[anchor] = np.inf
        neighbours = np.argsort(-closeness, kind="stable")[:d]
        bases.append(_fit_block(X[:, neighbours], _complement(bases, n), d))
        residual = np.maximum(norms ** 2 - subspace_energies(bases, X).sum(axis=0), 0.0)
    return bases


def _worst_fit(X: np.ndarray, bases: Sequence[np.ndarray], count: int) -> np.ndarray:
    captured = subspace_energies(bases, X).max(axis=0)
    unexplained = np.sum(X ** 2, axis=0) - captured
    return X[:, np.argsort(-unexplained, kind="stable")[:count]]


def _alternate(X: np.ndarray, bases: List[np.ndarray], d: int, max_iter: int) -> KSubspacesResult:
    n = X.shape[0]
    K = len(bases)
    labels, objective = _assign(bases, X)
    history = [objective]
    for _ in range(max_iter):
        for k in range(K):
            others = [bases[l] for l in range(K) if l != k]
            members = X[:, labels == k]
            if members.shape[1] == 0:
                logger.warning(f"component {k} lost all samples; reseeding from worst-fit samples")
                members = _worst_fit(X, bases, d)
            bases[k] = _fit_block(members, _complement(others, n), d)
        new_labels, objective = _assign(bases, X)
        history.append(objective)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    params = DaeParams(bases=tuple(bases), joint_orthonormal=K > 1)
    return KSubspacesResult(params=params, labels=labels, objective=objective, history=history)


def ksubspaces_fit(data: Union[Dataset, np.ndarray], K: int, d: int, restarts: int,
                   rng: np.random.Generator, init: Optional[DaeParams] = None,
                   max_iter: int = 100) -> KSubspacesResult:
    """Alternating maximization of (1/N) sum_i max_k ||U_k^T x_i||^2 over jointly orthonormal bases.

    ``init`` adds one extra start; among equal objectives the earliest start wins.
    """
    X = _samples_of(data)
    n = X.shape[0]
    if K * d > n:
        raise InvalidArgumentError(f"K*d = {K * d} exceeds n = {n}")
    if restarts < 1 and init is None:
        raise InvalidArgumentError("need at least one restart")

    starts: List[List[np.ndarray]] = []
    if init is not None:
        starts.append(retract(init.bases, joint=K > 1))
    for _ in range(restarts):
        starts.append(_seed_bases(X, K, d, rng))

    best: Optional[KSubspacesResult] = None
    for start in starts:
        result = _alternate(X, list(start), d, max_iter)
        if best is None or result.objective > best.objective + 1e-12 * max(1.0, abs(best.objective)):
            best = result
    return best


def ksubspaces_oracle(data: Union[Dataset, np.ndarray], K: int, d: int, restarts: int,
                      rng: np.random.Generator, init: Optional[DaeParams] = None) -> DaeParams:
    return ksubspaces_fit(data, K, d, restarts, rng, init=init).params


def match_and_score(params: DaeParams, model: MoLRGModel,
                    threshold: float = SUCCESS_THRESHOLD) -> RecoveryReport:
    """Best component matching by mean projector distance; success iff mean <= threshold.

    ``permutation[k]`` is the learned basis matched to true component k.
    Exhaustive for K <= 6, greedy (flagged approximate) beyond.
    """
    K = model.K
    if params.K != K or sorted(params.dims) != sorted(model.dims):
        raise InvalidArgumentError("learned and true models differ in components or dims")
    cost = np.full((K, K), np.inf)
    for k, U_true in enumerate(model.bases):
        for j, U_hat in enumerate(params.bases):
            if U_true.shape == U_hat.shape:
                cost[k, j] = subspace_distance(U_hat, U_true)

    approximate = K > MAX_EXHAUSTIVE_K
    if not approximate:
        permutation = min(itertools.permutations(range(K)),
                          key=lambda p: sum(cost[k, p[k]] for k in range(K)))
    else:
        logger.warning(f"K={K} > {MAX_EXHAUSTIVE_K}: greedy matching, result may be suboptimal")
        chosen = {}
        work = cost.copy()
        for _ in range(K):
            k, j = np.unravel_index(np.argmin(work), work.shape)
            chosen[int(k)] = int(j)
            work[k, :] = np.inf
            work[:, j] = np.inf
        permutation = tuple(chosen[k] for k in range(K))

    distances = np.array([cost[k, permutation[k]] for k in range(K)])
    mean_distance = float(distances.mean())
    return RecoveryReport(permutation=tuple(int(j) for j in permutation), distances=distances,
                          mean_distance=mean_distance, success=mean_distance <= threshold,
                          approximate=approximate)
