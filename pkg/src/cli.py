"""Command-line entry point: ``python run.py <command> [flags]``.

Every command resolves defaults < ``--config`` file < flags, writes the
result to ``<out-dir>/resolved-config.yaml`` and then its artifacts.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import Config, default_settings, flatten
from .errors import InvalidArgumentError, MolrgError
from .experiments import (Method, ModelFamily, average_ranks, concentration_suite, gl_curve, gl_score,
                          invariant_suite, phase_grid, rank_vs_snr, reverse_sample, score_source,
                          semantic_sweep)
from .logger import log_banner, logger, setup_logger
from .molrg import MoLRGModel, random_model, sample_dataset, subspace_energies
from .optim import Parameterization, match_and_score, sgd_train
from .schedule import evaluate
from .storage import ResultStore

DEFAULTS = flatten(default_settings())
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def parse_int_list(value: Any) -> List[int]:
    """Accept 3, "3", "2..8" (inclusive) or "2,4,6"."""
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    if isinstance(value, int):
        return [value]
    text = str(value).strip()
    try:
        if ".." in text:
            low, high = (int(part) for part in text.split("..", 1))
            if high < low:
                raise InvalidArgumentError(f"empty range '{text}'")
            return list(range(low, high + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise InvalidArgumentError(f"cannot read integer list '{text}'") from e


def parse_float_list(value: Any) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    if isinstance(value, (int, float)):
        return [float(value)]
    try:
        return [float(part) for part in str(value).split(",") if part.strip()]
    except ValueError as e:
        raise InvalidArgumentError(f"cannot read number list '{value}'") from e


# ---------------------------------------------------------------------------
# parser

def _flag(parser: argparse.ArgumentParser, flag: str, key: str, kind: Optional[Callable] = None,
          help: str = "", **kwargs):
    """Flags default to None so only explicitly given values override the config."""
    text = help if "default:" in help else f"{help} (default: {DEFAULTS[key]})"
    if kwargs.get("action") is not None:
        parser.add_argument(flag, dest=key, default=None, help=text, **kwargs)
    else:
        parser.add_argument(flag, dest=key, type=kind, default=None, help=text, **kwargs)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file, created with defaults if missing")
    _flag(common, "--seed", "run.seed", int, "master random seed")
    _flag(common, "--out-dir", "run.out_dir", str, "output directory (env MOLRG_OUT sets the default)")
    _flag(common, "--threads", "run.threads", int, "worker threads for experiment grids")
    _flag(common, "--log-level", "run.log_level", str, "log level", choices=LOG_LEVELS)
    return common


def _model_flags(parser):
    _flag(parser, "--n", "model.n", int, "ambient dimension")
    _flag(parser, "--k", "model.k", int, "number of components")
    _flag(parser, "--d", "model.d", int, "dimension of each subspace")
    _flag(parser, "--orth", "model.orth", help="mutually orthogonal subspaces",
          action=argparse.BooleanOptionalAction)
    _flag(parser, "--noise", "model.noise", float, "norm of the additive noise per sample")


def _schedule_flags(parser):
    _flag(parser, "--schedule", "schedule.kind", str, "noise schedule", choices=["ve_linear", "vp"])
    _flag(parser, "--sigma-min", "schedule.sigma_min", float, "VE noise level at t=0")
    _flag(parser, "--sigma-max", "schedule.sigma_max", float, "VE noise level at t=1")
    _flag(parser, "--beta-min", "schedule.vp_beta_min", float, "VP rate at t=0")
    _flag(parser, "--beta-max", "schedule.vp_beta_max", float, "VP rate at t=1")
    _flag(parser, "--lambda", "schedule.lambda", str, "loss weighting", choices=["unit", "snr"])


def _train_flags(parser):
    _flag(parser, "--param", "train.param", str, "denoiser parameterization",
          choices=[p.value for p in Parameterization])
    _flag(parser, "--lr", "train.learning_rate", float, "learning rate (unset: 4e-2 for K=1, 2e-5 otherwise)")
    _flag(parser, "--batch", "train.batch", int, "batch size (unset: 128*N_k for K=1, 1024 otherwise)")
    _flag(parser, "--iters", "train.iters", int, "iterations (unset: 2000 for K=1, 1e5 otherwise)")
    _flag(parser, "--lr-decay", "train.lr_decay", float,
          "step size factor per decay period (unset: 0.5 for K=1, 1 otherwise)")
    _flag(parser, "--decay-every", "train.decay_every", int,
          "decay period in iterations, 0 for none (unset: 250 for K=1, 0 otherwise)")
    _flag(parser, "--time-steps", "train.time_steps", int, "time discretization of [0, 1]")
    _flag(parser, "--init-from-truth", "train.init_from_truth", float,
          "start from U* + scale * Delta (needs a model file)")
    _flag(parser, "--shared-noise", "train.shared_noise", help="one noise vector per batch",
          action=argparse.BooleanOptionalAction)
    _flag(parser, "--log-every", "train.log_every", int, "loss trace interval")


def _source_flags(parser):
    _flag(parser, "--model", "inputs.model", str, "model file (default: <out-dir>/model.json)")
    _flag(parser, "--params", "inputs.params", str, "learned params file; replaces the ground truth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molrg", description="Diffusion models on mixtures of low-rank Gaussians")
    commands = parser.add_subparsers(dest="command", metavar="command")
    common = _common_flags()

    gen = commands.add_parser("gen", parents=[common], help="draw a model and a training set")
    _model_flags(gen)
    _flag(gen, "--num", "model.num", int, "number of samples")

    train = commands.add_parser("train", parents=[common], help="train a denoiser with SGD")
    _flag(train, "--dataset", "inputs.dataset", str, "dataset file (default: <out-dir>/dataset.json)")
    _flag(train, "--model", "inputs.model", str, "model file for initialization and scoring")
    _flag(train, "--k", "model.k", int, "components, when no model file is given")
    _flag(train, "--d", "model.d", int, "subspace dimension, when no model file is given")
    _train_flags(train)
    _schedule_flags(train)

    phase = commands.add_parser("phase", parents=[common], help="success-rate grid over (d, N)")
    _flag(phase, "--method", "phase.method", str, "recovery method", choices=[m.value for m in Method])
    _flag(phase, "--n", "model.n", int, "ambient dimension")
    _flag(phase, "--k", "model.k", int, "number of components")
    _flag(phase, "--orth", "model.orth", help="mutually orthogonal subspaces",
          action=argparse.BooleanOptionalAction)
    _flag(phase, "--noise", "model.noise", float, "norm of the additive noise per sample")
    _flag(phase, "--d", "phase.d", str, "subspace dimensions, e.g. 2..8")
    _flag(phase, "--num", "phase.num", str, "samples per component, e.g. 2..15")
    _flag(phase, "--trials", "phase.trials", int, "trials per cell")
    _flag(phase, "--restarts", "phase.restarts", int, "K-subspaces restarts")
    _train_flags(phase)

    glscore = commands.add_parser("glscore", parents=[common], help="generalization score")
    _flag(glscore, "--generated", "inputs.generated", str, "score this sample table instead of running the curve")
    _flag(glscore, "--dataset", "inputs.dataset", str, "training set of the scored samples")
    _flag(glscore, "--model", "inputs.model", str, "model for the reference draw")
    _flag(glscore, "--n", "model.n", int, "ambient dimension")
    _flag(glscore, "--k", "glscore.k", int, "number of components of the curve")
    _flag(glscore, "--orth", "model.orth", help="mutually orthogonal subspaces",
          action=argparse.BooleanOptionalAction)
    _flag(glscore, "--dims", "glscore.dims", str, "subspace dimensions of the curve")
    _flag(glscore, "--multipliers", "glscore.multipliers", str, "values of N_k/d_k")
    _flag(glscore, "--seeds", "glscore.seeds", int, "seeds per point")
    _flag(glscore, "--steps", "sampler.steps", int, "Heun steps")
    _train_flags(glscore)
    _schedule_flags(glscore)

    rank = commands.add_parser("rank", parents=[common], help="Jacobian rank against SNR")
    _source_flags(rank)
    _flag(rank, "--eta", "rank.eta", float, "energy threshold")
    _flag(rank, "--trajectories", "rank.trajectories", int, "forward trajectories")
    _flag(rank, "--time-steps", "train.time_steps", int, "time grid size")
    _schedule_flags(rank)

    sweep = commands.add_parser("sweep", parents=[common], help="move along a Jacobian singular vector")
    _source_flags(sweep)
    _flag(sweep, "--index", "sweep.index", int, "1-based singular vector index")
    _flag(sweep, "--t", "sweep.t", float, "time of the perturbed state")
    _flag(sweep, "--alphas", "sweep.alphas", str, "step sizes, comma separated")
    _flag(sweep, "--eta", "rank.eta", float, "energy threshold for the rank check")
    _flag(sweep, "--steps", "sampler.steps", int, "Heun steps")
    _flag(sweep, "--t-min", "sampler.t_min", float, "final sampling time")
    _schedule_flags(sweep)

    sample = commands.add_parser("sample", parents=[common], help="probability-flow sampling")
    _source_flags(sample)
    _flag(sample, "--steps", "sampler.steps", int, "Heun steps")
    _flag(sample, "--count", "sampler.count", int, "number of samples")
    _flag(sample, "--t-min", "sampler.t_min", float, "final sampling time")
    _schedule_flags(sample)

    check = commands.add_parser("check", parents=[common], help="run the invariant and concentration checks")
    _flag(check, "--quick", "check.quick", help="smaller invariant sample counts",
          action=argparse.BooleanOptionalAction)
    _flag(check, "--trials", "check.trials", int, "concentration trials")

    return parser


# ---------------------------------------------------------------------------
# commands

def _input_path(config: Config, key: str, default_name: str) -> str:
    return config.get("inputs", key) or str(Path(config.out_dir) / default_name)


def _load_model(config: Config, required: bool = True) -> Optional[MoLRGModel]:
    path = _input_path(config, "model", "model.json")
    if not required and not Path(path).exists():
        return None
    return ResultStore.load_model(path)


def _load_source(config: Config):
    """(model, source): learned params replace the ground truth as the score source."""
    model = _load_model(config)
    params_path = config.get("inputs", "params")
    if params_path:
        params = ResultStore.load_params(params_path)
        if params.n != model.n:
            raise InvalidArgumentError(f"params live in R^{params.n}, model in R^{model.n}")
        return model, params
    return model, model


def cmd_gen(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    model = random_model(rng, config.n, config.K, config.d, mutually_orthogonal=config.orth)
    dataset = sample_dataset(model, config.num, config.noise, rng)
    store.save_model(model)
    store.save_dataset(dataset)
    logger.info(f"Generated {dataset.N} samples from K={model.K}, n={model.n}, dims={model.dims}")
    return 0


def cmd_train(config: Config, store: ResultStore) -> int:
    dataset = ResultStore.load_dataset(_input_path(config, "dataset", "dataset.json"))
    model = _load_model(config, required=False)
    init = config.init_from_truth
    if init is not None and model is None:
        raise InvalidArgumentError("--init-from-truth needs a model file")
    K = model.K if model is not None else config.K
    dims = model.dims if model is not None else [config.d] * K
    parameterization = Parameterization(config.parameterization)
    train_config = config.train_config(K, max(1, dataset.N // K))

    with store.open_trace("loss_trace.csv", ["iter", "loss_mc_estimate", "grad_norm"]) as trace:
        params = sgd_train(dataset, train_config, model_for_init=model if init is not None else None,
                           K=K, dims=dims, parameterization=parameterization, schedule=config.schedule,
                           callback=lambda it, _, loss, grad_norm: trace.append([it, loss, grad_norm]))
    store.save_params(params)

    if model is not None:
        report = match_and_score(params, model)
        store.write_csv("recovery.csv", ["component", "matched", "distance"],
                        [(k, report.permutation[k], report.distances[k]) for k in range(model.K)])
        logger.info(f"Mean subspace distance {report.mean_distance:.4g} "
                    f"({'success' if report.success else 'failure'})")
    return 0


def cmd_phase(config: Config, store: ResultStore) -> int:
    family = ModelFamily(K=config.K, n=config.n, orth=config.orth)
    d_values = parse_int_list(config.get("phase", "d"))
    N_values = parse_int_list(config.get("phase", "num"))
    grid = phase_grid(family, d_values, N_values, int(config.get("phase", "trials")),
                      config.get("phase", "method"), noise=config.noise, master_seed=config.seed,
                      threads=config.threads, restarts=int(config.get("phase", "restarts")),
                      train_overrides=config.train_overrides())
    store.write_csv("phase.csv", ["d", "N", "trials", "successes", "rate"], grid.rows())
    store.write_csv("phase_trials.csv", ["trial", "seed", "K", "d", "N", "mean_distance", "success"],
                    grid.records)
    store.write_phase_heatmap("phase.svg", grid.rates, grid.d_values, grid.N_values,
                              title=f"{grid.method.value}, K={family.K}, n={family.n}")
    return 0


def cmd_glscore(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    generated_path = config.get("inputs", "generated")
    if generated_path:
        generated = ResultStore.read_matrix_csv(generated_path)
        dataset = ResultStore.load_dataset(_input_path(config, "dataset", "dataset.json"))
        model = _load_model(config)
        reference = sample_dataset(model, generated.shape[1], 0.0, rng).samples
        score = gl_score(generated, dataset.samples, reference)
        ratio = dataset.N / model.K / model.dims[0]
        store.write_csv("glscore.csv", ["ratio", "score", "seed"], [(ratio, score, config.seed)])
        logger.info(f"GL score {score:.4f}")
        return 0

    family = ModelFamily(K=int(config.get("glscore", "k")), n=config.n, orth=config.orth)
    seeds = [config.seed + i for i in range(int(config.get("glscore", "seeds")))]
    multipliers = parse_float_list(config.get("glscore", "multipliers"))
    curve = gl_curve(family, parse_int_list(config.get("glscore", "dims")), multipliers, seeds,
                     schedule=config.schedule,
                     train_overrides=config.train_overrides(),
                     steps=int(config.get("sampler", "steps")))
    store.write_csv("gl_curve.csv", ["ratio", "score", "seed"], curve.rows())
    store.write_csv("gl_curve_pooled.csv", ["ratio", "pooled_score"], curve.pooled())
    if curve.ratios:
        store.write_curve("gl_curve.svg", curve.ratios, curve.scores, "N_k / d_k", "GL score",
                          logx=True, band=[0.7, 1.3])
    return 0


def cmd_rank(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    model, source = _load_source(config)
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    reports = rank_vs_snr(source, x0, config.schedule, rng, eta=float(config.get("rank", "eta")),
                          trajectories=int(config.get("rank", "trajectories")),
                          time_steps=int(config.get("train", "time_steps")))
    store.write_csv("rank.csv", ["trajectory", "t", "snr", "sigma", "numerical_rank", "n", "rank_ratio"],
                    [(r.trajectory, r.t, r.snr, r.sigma, r.numerical_rank, r.n, r.rank_ratio)
                     for r in reports])
    summary = average_ranks(reports)
    store.write_csv("rank_summary.csv", ["t", "snr", "mean_rank", "min_rank", "max_rank"], summary)
    store.write_curve("rank.svg", [row[1] for row in summary], [row[2] / model.n for row in summary],
                      "SNR", "numerical rank / n", logx=True)
    return 0


def cmd_sweep(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    model, source = _load_source(config)
    schedule = config.schedule
    state = evaluate(schedule, float(config.get("sweep", "t")))
    x0 = sample_dataset(model, 1, 0.0, rng).samples[:, 0]
    x_t = state.s * x0 + state.gamma * rng.standard_normal(model.n)
    result = semantic_sweep(source, x_t, state, int(config.get("sweep", "index")),
                            parse_float_list(config.get("sweep", "alphas")), schedule, rng,
                            steps=int(config.get("sampler", "steps")),
                            t_min=float(config.get("sampler", "t_min")),
                            eta=float(config.get("rank", "eta")))
    header = (["direction", "alpha"] + [f"energy_{k + 1}" for k in range(model.K)]
              + [f"x{i}" for i in range(model.n)])
    rows = []
    for kind, samples in (("singular", result.samples), ("random", result.control_samples)):
        for alpha, x in zip(result.alphas, samples):
            energies = subspace_energies(model.bases, x[:, None])[:, 0]
            rows.append([kind, alpha, *energies, *x])
    store.write_csv("sweep.csv", header, rows)
    return 0


def cmd_sample(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    model, source = _load_source(config)
    samples = reverse_sample(score_source(source), config.schedule, int(config.get("sampler", "steps")), rng,
                             count=int(config.get("sampler", "count")), n=model.n,
                             t_min=float(config.get("sampler", "t_min")))
    store.write_matrix_csv("samples.csv", samples)
    norms = np.linalg.norm(samples, axis=0)
    captured = np.sqrt(subspace_energies(model.bases, samples).max(axis=0))
    residual = np.sqrt(np.maximum(norms ** 2 - captured ** 2, 0.0)) / np.where(norms > 0, norms, 1.0)
    logger.info(f"Mean off-subspace residual {residual.mean():.4g} over {samples.shape[1]} samples")
    return 0


def cmd_check(config: Config, store: ResultStore) -> int:
    rng = np.random.default_rng(config.seed)
    results = invariant_suite(rng, quick=bool(config.get("check", "quick")))
    concentration = concentration_suite(int(config.get("check", "trials")), rng)
    rows = [(r.name, int(r.passed), r.detail) for r in results]
    rows.append(("concentration at N=1e4, d=100", int(concentration.passed),
                 f"norm rate {concentration.norm_violation_rate:g}, "
                 f"covariance rate {concentration.cov_violation_rate:g}"))
    store.write_csv("check.csv", ["check", "passed", "detail"], rows)
    failed = [row[0] for row in rows if not row[1]]
    if failed:
        raise MolrgError(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    logger.info(f"All {len(rows)} checks passed")
    return 0


COMMANDS: Dict[str, Callable[[Config, ResultStore], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "phase": cmd_phase,
    "glscore": cmd_glscore,
    "rank": cmd_rank,
    "sweep": cmd_sweep,
    "sample": cmd_sample,
    "check": cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    try:
        config = Config(args.config)
        config.override({key: value for key, value in vars(args).items() if "." in key})
        config.override({"run.command": args.command})
        config.ensure_directories()
        setup_logger(log_file=config.log_file, level=config.log_level)
        log_banner(f"MoLRG Lab - {args.command}")
        store = ResultStore(config.out_dir)
        config.dump_resolved(str(store.path("resolved-config.yaml")))
        return COMMANDS[args.command](config, store)
    except MolrgError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
