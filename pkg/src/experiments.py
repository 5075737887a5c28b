"""Desk-scale experiment harnesses.

Phase-transition grids, generalization (GL) scores, Jacobian rank along
forward trajectories, probability-flow sampling, semantic-direction sweeps
and the concentration checks behind the sample-complexity bounds.
"""

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from .dae import DaeParams, Denoiser, PosteriorDenoiser, RankReport, numerical_rank
from .errors import InvalidArgumentError, InvalidIndexError, SolverDivergedError, UndefinedScoreError
from .logger import logger
from .molrg import MoLRGModel, log_pdf_t, posterior_mean, random_model, sample_dataset, score_gt
from .optim import (Parameterization, TrainConfig, as_denoiser, ksubspaces_oracle, loss_mc,
                    make_denoiser, match_and_score, pca_oracle, score_matching_loss, sgd_train,
                    subspace_distance, RecoveryReport, SUCCESS_THRESHOLD)
from .schedule import Schedule, ScheduleKind, ScheduleState, evaluate, sampling_times, time_grid

ScoreFn = Callable[[np.ndarray, ScheduleState], np.ndarray]

DEFAULT_SAMPLER_STEPS = 18
DEFAULT_TRAJECTORIES = 15
DEFAULT_RESTARTS = 10
GL_CHUNK_ROWS = 2048
_SCHEDULE_KINDS = (ScheduleKind.VE_LINEAR, ScheduleKind.VP)


class Method(str, Enum):
    PCA = "pca"
    SGD = "sgd"
    KSUBSPACES = "ksubspaces"


@dataclass(frozen=True)
class ModelFamily:
    K: int = 1
    n: int = 48
    orth: bool = True


@dataclass
class PhaseGrid:
    d_values: List[int]
    N_values: List[int]
    trials: int
    method: Method
    successes: np.ndarray
    master_seed: int = 0
    records: List[Tuple[int, int, int, int, int, float, bool]] = field(default_factory=list)

    @property
    def rates(self) -> np.ndarray:
        return self.successes / self.trials

    def rows(self) -> List[Tuple[int, int, int, int, float]]:
        """(d, N, trials, successes, rate) in d-major order."""
        rates = self.rates
        return [(d, N, self.trials, int(self.successes[i, j]), float(rates[i, j]))
                for i, d in enumerate(self.d_values) for j, N in enumerate(self.N_values)]


@dataclass
class GlCurve:
    ratios: List[float] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)
    numerators: List[float] = field(default_factory=list)
    denominators: List[float] = field(default_factory=list)

    def rows(self) -> List[Tuple[float, float, int]]:
        return list(zip(self.ratios, self.scores, self.seeds))

    def pooled(self) -> List[Tuple[float, float]]:
        """(ratio, sum of numerators / sum of denominators) over the seeds, by ratio."""
        totals = defaultdict(lambda: [0.0, 0.0])
        for ratio, num, den in zip(self.ratios, self.numerators, self.denominators):
            totals[ratio][0] += num
            totals[ratio][1] += den
        return [(ratio, num / den) for ratio, (num, den) in sorted(totals.items())]


@dataclass
class SweepResult:
    direction: np.ndarray
    control_direction: np.ndarray
    alphas: List[float]
    samples: List[np.ndarray]
    control_samples: List[np.ndarray]
    singular_value: float


@dataclass
class ConcentrationReport:
    trials: int
    N: int
    d: int
    norm_bound: float
    cov_bound: float
    norm_violation_rate: float
    cov_violation_rate: float
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.norm_violation_rate <= self.tolerance and self.cov_violation_rate <= self.tolerance


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# phase transition grids

def trial_seed(master_seed: int, d: int, N: int, trial: int) -> np.random.SeedSequence:
    """Per-trial seed: numpy's SeedSequence hashes the four words into 128 bits of entropy.

    The seed depends only on the cell and trial, never on scheduling order.
    """
    if min(master_seed, d, N, trial) < 0:
        raise InvalidArgumentError("seed words must be nonnegative")
    return np.random.SeedSequence([master_seed, d, N, trial])


def run_trial(family: ModelFamily, d: int, N: int, method: Method, noise: float,
              seed: np.random.SeedSequence, restarts: int = DEFAULT_RESTARTS,
              train_overrides: Optional[Mapping[str, Any]] = None,
              threshold: float = SUCCESS_THRESHOLD) -> RecoveryReport:
    """One recovery attempt; N counts samples per component.

    SGD settings are ``TrainConfig.defaults_for(K, N)`` with ``train_overrides``
    applied on top, so the batch follows N unless it is given explicitly.
    """
    rng = np.random.default_rng(seed)
    model = random_model(rng, family.n, family.K, d, mutually_orthogonal=family.orth)
    dataset = sample_dataset(model, N * family.K, noise, rng, balanced=True)

    if method is Method.PCA:
        if family.K != 1:
            raise InvalidArgumentError("PCA recovery applies to a single component")
        params = DaeParams(bases=(pca_oracle(dataset, d, avoid=model.bases[0]),))
    elif method is Method.KSUBSPACES:
        params = ksubspaces_oracle(dataset, family.K, d, restarts, rng)
    else:
        config = TrainConfig.defaults_for(family.K, N, **{**(train_overrides or {}),
                                                          "seed": int(rng.integers(2 ** 63))})
        if family.K == 1:
            params = sgd_train(dataset, config, K=1, dims=[d], parameterization=Parameterization.SINGLE)
        else:
            params = sgd_train(dataset, config, model_for_init=model, K=family.K,
                               parameterization=Parameterization.HARDMAX)
    return match_and_score(params, model, threshold)


def phase_grid(family: ModelFamily, d_values: Sequence[int], N_values: Sequence[int], trials: int,
               method: Union[Method, str], noise: float = 0.0, master_seed: int = 0,
               threads: int = 1, restarts: int = DEFAULT_RESTARTS,
               train_overrides: Optional[Mapping[str, Any]] = None,
               threshold: float = SUCCESS_THRESHOLD) -> PhaseGrid:
    """Success rate of subspace recovery over a (d, N) grid.

    Every trial gets a fresh model and dataset from ``trial_seed``; workers
    only add integer counts into their own cell, so the result does not
    depend on ``threads``.
    """
    method = Method(method)
    d_values, N_values = [int(d) for d in d_values], [int(N) for N in N_values]
    if not d_values or not N_values:
        raise InvalidArgumentError("d and N ranges must be nonempty")
    if trials < 1:
        raise InvalidArgumentError(f"trials must be at least 1, got {trials}")

    tasks = [(i, j, trial) for i in range(len(d_values)) for j in range(len(N_values))
             for trial in range(trials)]

    def work(task):
        i, j, trial = task
        d, N = d_values[i], N_values[j]
        seed = trial_seed(master_seed, d, N, trial)
        report = run_trial(family, d, N, method, noise, seed, restarts=restarts,
                           train_overrides=train_overrides, threshold=threshold)
        return i, j, (trial, int(seed.generate_state(1)[0]), family.K, d, N, report.mean_distance, report.success)

    logger.info(f"Phase grid ({method.value}): K={family.K}, n={family.n}, "
                f"{len(d_values)}x{len(N_values)} cells, {trials} trials, {threads} threads")
    successes = np.zeros((len(d_values), len(N_values)), dtype=int)
    records = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for i, j, record in pool.map(work, tasks):
            successes[i, j] += int(record[-1])
            records.append(record)
    grid = PhaseGrid(d_values=d_values, N_values=N_values, trials=trials, method=method,
                     successes=successes, master_seed=master_seed, records=records)
    for i, d in enumerate(d_values):
        logger.info(f"  d={d}: " + " ".join(f"{r:.2f}" for r in grid.rates[i]))
    return grid


# ---------------------------------------------------------------------------
# generalization score

def nearest_neighbor_total(points: np.ndarray, pool: np.ndarray, exclude_self: bool = False) -> float:
    """Sum over columns of ``points`` of the distance to the nearest column of ``pool``."""
    total = 0.0
    for start in range(0, points.shape[1], GL_CHUNK_ROWS):
        block = cdist(points[:, start:start + GL_CHUNK_ROWS].T, pool.T)
        if exclude_self:
            rows = np.arange(block.shape[0])
            block[rows, rows + start] = np.inf
        total += float(block.min(axis=1).sum())
    return total


def gl_terms(generated: np.ndarray, training: np.ndarray, reference: np.ndarray) -> Tuple[float, float]:
    """(generated-to-training, reference self) nearest-neighbour totals."""
    generated, training, reference = (np.asarray(a, dtype=float) for a in (generated, training, reference))
    if min(generated.shape[1], training.shape[1], reference.shape[1]) < 2:
        raise InvalidArgumentError("GL score needs at least two points in every set")
    denominator = nearest_neighbor_total(reference, reference, exclude_self=True)
    if denominator == 0:
        raise UndefinedScoreError("reference points coincide; GL score is undefined")
    return nearest_neighbor_total(generated, training), denominator


def gl_score(generated: np.ndarray, training: np.ndarray, reference: np.ndarray) -> float:
    """Nearest-neighbour spread of generated samples against the training set,
    normalised by the self nearest-neighbour spread of a fresh reference draw.

    0 means every generated sample is a training copy; about 1 means the
    samples are as spread as new draws from the distribution.
    """
    numerator, denominator = gl_terms(generated, training, reference)
    return numerator / denominator


# ---------------------------------------------------------------------------
# probability-flow sampling

def ground_truth_score(model: MoLRGModel) -> ScoreFn:
    return lambda x, state: score_gt(model, x, state)


def tweedie_score(denoiser: Denoiser) -> ScoreFn:
    """Score implied by a denoiser: (s x_theta(x) - x) / gamma^2."""
    return lambda x, state: (state.s * denoiser(x, state) - x) / state.gamma ** 2


def score_source(source: Union[MoLRGModel, DaeParams, Denoiser]) -> ScoreFn:
    if isinstance(source, MoLRGModel):
        return ground_truth_score(source)
    return tweedie_score(as_denoiser(source))


def reverse_sample(score_fn: ScoreFn, schedule: Schedule, steps: int = DEFAULT_SAMPLER_STEPS,
                   rng: Optional[np.random.Generator] = None, count: int = 1, n: Optional[int] = None,
                   t_min: float = 1e-3, x_init: Optional[np.ndarray] = None,
                   t_start: float = 1.0) -> np.ndarray:
    """Integrate dx/dt = f x - g^2/2 score from t_start down to t_min with Heun's method.

    Without ``x_init`` the start is drawn from N(0, (s^2 + gamma^2) I) at
    t_start, the variance of the marginal far from the data.
    """
    times = sampling_times(schedule, steps, t_start=t_start, t_end=t_min)
    if x_init is None:
        if rng is None or n is None:
            raise InvalidArgumentError("need rng and n to draw the initial state")
        start = evaluate(schedule, t_start)
        x = math.sqrt(start.s ** 2 + start.gamma ** 2) * rng.standard_normal((n, count))
    else:
        x = np.array(x_init, dtype=float)

    def velocity(y, t):
        return schedule.drift(t) * y - 0.5 * schedule.diffusion_sq(t) * score_fn(y, evaluate(schedule, t))

    for step, (t_cur, t_next) in enumerate(zip(times[:-1], times[1:])):
        h = t_next - t_cur
        d_cur = velocity(x, t_cur)
        x_euler = x + h * d_cur
        d_next = velocity(x_euler, t_next)
        x = x + h * (0.5 * d_cur + 0.5 * d_next)
        if not np.all(np.isfinite(x)):
            raise SolverDivergedError(step)
    return x


# ---------------------------------------------------------------------------
# Jacobian rank and semantic directions

def _as_rank_denoiser(source) -> Denoiser:
    if isinstance(source, MoLRGModel):
        return PosteriorDenoiser(source)
    return as_denoiser(source)


def rank_vs_snr(source: Union[MoLRGModel, DaeParams, Denoiser], x0: np.ndarray, schedule: Schedule,
                rng: np.random.Generator, eta: float = 0.99, trajectories: int = DEFAULT_TRAJECTORIES,
                time_steps: int = 64) -> List[RankReport]:
    """Numerical rank of the denoiser Jacobian along forward trajectories x_t = s x0 + gamma eps.

    Each trajectory keeps one eps for all times.
    """
    denoiser = _as_rank_denoiser(source)
    x0 = np.asarray(x0, dtype=float)
    reports = []
    for trajectory in range(trajectories):
        eps = rng.standard_normal(x0.shape[0])
        for t in time_grid(time_steps):
            state = evaluate(schedule, t)
            report = numerical_rank(denoiser.jacobian(state.s * x0 + state.gamma * eps, state), eta)
            reports.append(replace(report, snr=state.snr, t=t, sigma=state.sigma, trajectory=trajectory))
    return reports


def average_ranks(reports: Sequence[RankReport]) -> List[Tuple[float, float, float, int, int]]:
    """(t, snr, mean rank, min rank, max rank) per time, ordered by t."""
    by_time = defaultdict(list)
    for report in reports:
        by_time[report.t].append(report)
    rows = []
    for t in sorted(by_time):
        ranks = [r.numerical_rank for r in by_time[t]]
        rows.append((t, by_time[t][0].snr, float(np.mean(ranks)), min(ranks), max(ranks)))
    return rows


def _positive_peak(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def semantic_sweep(source: Union[MoLRGModel, DaeParams, Denoiser], x_t: np.ndarray, state: ScheduleState,
                   index: int, alphas: Sequence[float], schedule: Schedule, rng: np.random.Generator,
                   steps: int = DEFAULT_SAMPLER_STEPS, t_min: float = 1e-3, eta: float = 0.99) -> SweepResult:
    """Reverse-sample from x_t + alpha v_i for the i-th right singular vector of the Jacobian.

    ``index`` is 1-based and must not exceed the numerical rank. The same
    alphas are replayed along a random unit direction as a control.
    """
    if math.isnan(state.t):
        raise InvalidArgumentError("sweep state must carry its time")
    denoiser = _as_rank_denoiser(source)
    score_fn = score_source(source)
    x_t = np.asarray(x_t, dtype=float)
    jac = denoiser.jacobian(x_t, state)
    rank = numerical_rank(jac, eta).numerical_rank
    if not 1 <= index <= rank:
        raise InvalidIndexError(f"singular index {index} outside 1..{rank}")
    _, values, vt = np.linalg.svd(jac)
    direction = _positive_peak(vt[index - 1])
    control = rng.standard_normal(x_t.shape[0])
    control /= np.linalg.norm(control)

    def sweep(v):
        return [reverse_sample(score_fn, schedule, steps, x_init=(x_t + alpha * v)[:, None],
                               t_start=state.t, t_min=t_min)[:, 0] for alpha in alphas]

    return SweepResult(direction=direction, control_direction=control, alphas=list(alphas),
                       samples=sweep(direction), control_samples=sweep(control),
                       singular_value=float(values[index - 1]))


# ---------------------------------------------------------------------------
# GL curve

def gl_curve(family: ModelFamily, dims: Sequence[int], multipliers: Sequence[float], seeds: Sequence[int],
             schedule: Optional[Schedule] = None, train_overrides: Optional[Mapping[str, Any]] = None,
             steps: int = DEFAULT_SAMPLER_STEPS, init_from_truth: bool = True) -> GlCurve:
    """Train, sample and score for every (d_k, N_k = multiplier * d_k, seed).

    Training uses the soft-max parameterization (single subspace for K = 1)
    with ``TrainConfig.defaults_for(K, N_k)`` under ``train_overrides``; the
    model generates as many samples as it was trained on.
    """
    schedule = schedule or Schedule(kind=ScheduleKind.VP)
    curve = GlCurve(config={"K": family.K, "n": family.n, "orth": family.orth,
                            "schedule": schedule.kind.value, "steps": steps})
    for d in dims:
        for multiplier in multipliers:
            N_k = max(1, int(round(multiplier * d)))
            for seed in seeds:
                rng = np.random.default_rng(np.random.SeedSequence([seed, d, N_k]))
                model = random_model(rng, family.n, family.K, d, mutually_orthogonal=family.orth)
                dataset = sample_dataset(model, N_k * family.K, 0.0, rng, balanced=True)
                config = TrainConfig.defaults_for(family.K, N_k, **{**(train_overrides or {}),
                                                                    "seed": int(rng.integers(2 ** 63))})
                parameterization = Parameterization.SINGLE if family.K == 1 else Parameterization.SOFTMAX
                params = sgd_train(dataset, config, model_for_init=model if init_from_truth else None,
                                   K=family.K, dims=[d] * family.K, parameterization=parameterization,
                                   schedule=schedule)
                denoiser = make_denoiser(params, parameterization)
                generated = reverse_sample(tweedie_score(denoiser), schedule, steps, rng,
                                           count=dataset.N, n=family.n)
                reference = sample_dataset(model, dataset.N, 0.0, rng).samples
                numerator, denominator = gl_terms(generated, dataset.samples, reference)
                score = numerator / denominator
                logger.info(f"GL d={d}, N_k/d_k={N_k / d:g}, seed={seed}: {score:.4f}")
                curve.ratios.append(N_k / d)
                curve.scores.append(score)
                curve.seeds.append(int(seed))
                curve.numerators.append(numerator)
                curve.denominators.append(denominator)
    return curve


# ---------------------------------------------------------------------------
# concentration checks

def norm_bound(N: int) -> float:
    return 2.0 * math.sqrt(math.log(N)) + 2.0


def covariance_bound(N: int, d: int) -> float:
    return 9.0 * (math.sqrt(d) + math.sqrt(math.log(N))) / math.sqrt(N)


def concentration_violations(coeffs: np.ndarray) -> Tuple[int, bool]:
    """Count columns with | ||a_i|| - sqrt(d) | above the norm bound, and whether the
    sample covariance misses I by more than the covariance bound in spectral norm."""
    coeffs = np.asarray(coeffs, dtype=float)
    d, N = coeffs.shape
    deviations = np.abs(np.linalg.norm(coeffs, axis=0) - math.sqrt(d))
    norm_violations = int(np.sum(deviations > norm_bound(N)))
    covariance = coeffs @ coeffs.T / N - np.eye(d)
    return norm_violations, bool(np.linalg.norm(covariance, 2) > covariance_bound(N, d))


def concentration_suite(trials: int, rng: np.random.Generator, N: int = 10_000, d: int = 100,
                        tolerance: float = 1e-3) -> ConcentrationReport:
    if trials < 1:
        raise InvalidArgumentError(f"trials must be at least 1, got {trials}")
    if N < 2 or d < 1:
        raise InvalidArgumentError("need N >= 2 and d >= 1")
    norm_total, cov_total = 0, 0
    for _ in range(trials):
        norm_violations, cov_violated = concentration_violations(rng.standard_normal((d, N)))
        norm_total += norm_violations
        cov_total += int(cov_violated)
    report = ConcentrationReport(trials=trials, N=N, d=d, norm_bound=norm_bound(N),
                                 cov_bound=covariance_bound(N, d),
                                 norm_violation_rate=norm_total / (trials * N),
                                 cov_violation_rate=cov_total / trials, tolerance=tolerance)
    if not report.passed:
        logger.warning(f"concentration bounds violated: norm rate {report.norm_violation_rate:g}, "
                       f"covariance rate {report.cov_violation_rate:g}")
    return report


# ---------------------------------------------------------------------------
# invariant quick-suite

def _random_triple(rng: np.random.Generator):
    n = int(rng.integers(4, 13))
    K = int(rng.integers(1, 4))
    d = int(rng.integers(1, max(2, n // K)))
    schedule = Schedule(kind=_SCHEDULE_KINDS[int(rng.integers(2))])
    model = random_model(rng, n, K, d)
    state = evaluate(schedule, float(rng.uniform(0.05, 1.0)))
    x = state.s * sample_dataset(model, 1, 0.0, rng).samples[:, 0] + state.gamma * rng.standard_normal(n)
    return model, x, state


def _check_tweedie(rng, count) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        model, x, state = _random_triple(rng)
        gap = np.linalg.norm(state.s * posterior_mean(model, x, state) - x
                             - state.s ** 2 * state.sigma ** 2 * score_gt(model, x, state))
        worst = max(worst, gap / (1.0 + np.linalg.norm(x)))
    return CheckResult("tweedie identity", worst <= 1e-10, f"worst relative gap {worst:.3g}")


def _check_score_fd(rng, count, h=1e-5) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        model, x, state = _random_triple(rng)
        steps = h * np.eye(x.shape[0])
        fd = (log_pdf_t(model, x[:, None] + steps, state) - log_pdf_t(model, x[:, None] - steps, state)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - score_gt(model, x, state)))))
    return CheckResult("score is gradient of log density", worst <= 1e-4, f"worst coordinate gap {worst:.3g}")


def _check_loss_identity(rng, count) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        model, _, _ = _random_triple(rng)
        dataset = sample_dataset(model, 5, 0.0, rng)
        schedule = Schedule(kind=_SCHEDULE_KINDS[int(rng.integers(2))])
        params = DaeParams.from_model(model)
        seed = int(rng.integers(2 ** 32))
        a = loss_mc(params, dataset, schedule, 3, np.random.default_rng(seed), time_steps=8)
        b = score_matching_loss(params, dataset, schedule, 3, np.random.default_rng(seed), time_steps=8)
        worst = max(worst, abs(a - b) / (1.0 + abs(a)))
    return CheckResult("denoising and score-matching losses agree", worst <= 1e-10, f"worst gap {worst:.3g}")


def _check_pca_recovery(rng, count) -> CheckResult:
    worst = 0.0
    for _ in range(count):
        d = int(rng.integers(1, 6))
        model = random_model(rng, 20, 1, d)
        dataset = sample_dataset(model, d + int(rng.integers(0, 10)), 0.0, rng)
        worst = max(worst, subspace_distance(pca_oracle(dataset, d), model.bases[0]))
    return CheckResult("noiseless PCA recovers the subspace", worst <= 1e-8, f"worst distance {worst:.3g}")


def _check_memorization(rng) -> CheckResult:
    model = random_model(rng, 12, 2, 3)
    training = sample_dataset(model, 40, 0.0, rng).samples
    reference = sample_dataset(model, 40, 0.0, rng).samples
    score = gl_score(training.copy(), training, reference)
    return CheckResult("memorized samples score zero", score == 0.0, f"score {score:g}")


def _check_linear_rank(rng) -> CheckResult:
    model = random_model(rng, 16, 1, 4)
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    reports = rank_vs_snr(model, x0, Schedule(), rng, trajectories=2, time_steps=8)
    ranks = {r.numerical_rank for r in reports}
    return CheckResult("single-subspace Jacobian has rank d", ranks == {4}, f"ranks {sorted(ranks)}")


def invariant_suite(rng: np.random.Generator, quick: bool = True) -> List[CheckResult]:
    """Identities that must hold on any build; ``quick`` shrinks the sample counts."""
    count = 20 if quick else 1000
    results = [
        _check_tweedie(rng, count),
        _check_score_fd(rng, 10 if quick else 100),
        _check_loss_identity(rng, 10 if quick else 100),
        _check_pca_recovery(rng, 10),
        _check_memorization(rng),
        _check_linear_rank(rng),
    ]
    concentration = concentration_suite(2 if quick else 50, rng)
    results.append(CheckResult("concentration bounds", concentration.passed,
                               f"norm rate {concentration.norm_violation_rate:g}, "
                               f"covariance rate {concentration.cov_violation_rate:g}"))
    for result in results:
        (logger.info if result.passed else logger.error)(
            f"{'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")
    return results
