# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""
Command-line experiment runner.

Sub-commands:

* ``gen-data``: write a synthetic dataset (``ASGD`` binary) plus a sidecar
  manifest.
* ``run``: simulate one (strategy, gamma, seed) configuration and export
  its trace.
* ``sweep``: grid-search gamma over seeds (and optionally timing models)
  and pick the stepsize with the lowest tail gradient norm.
* ``diagnose``: compute delay, correlation and bound diagnostics from one
  or more run directories of the same configuration.

Usage examples::

    python3 asgrad.py gen-data --alpha 1 --beta 1 --n 10 --m 200 --d 300 --seed 0 -o syn11.bin
    python3 asgrad.py run --config experiment.yaml --strategy shuffled --gamma 0.002 -o runs/shuffled
    python3 asgrad.py sweep --config experiment.yaml --strategy pure --seeds 0,1,2,3,4 -o sweeps/pure
    python3 asgrad.py diagnose runs/shuffled -o runs/shuffled/diagnostics

Exit codes: 0 success, 1 internal error, 2 configuration error,
3 divergence, 4 incomplete trace.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import (
    ExperimentConfig,
    SweepSettings,
    build_dataset,
    config_hash,
    dump_config,
    load_experiment_config,
    to_run_config,
)
from .data import Dataset, SynConfig, generate_synthetic, save_dataset
from .diagnostics import (
    assigned_virtual_iterates,
    default_correlation_period,
    delay_stats,
    delay_sum_check,
    delay_variance,
    optimality_gaps,
    period_rule_for,
    phi_from_report,
    sequence_correlation,
    received_process_bound,
    received_process_conditions,
    assigned_process_bound,
    assigned_process_conditions,
    trajectory_probes,
    virtual_iterates,
)
from .engine import Trace, run
from .errors import AsgradError, ConfigurationError, DivergenceError, ParameterError
from .files import write_file_atomic
from .log import configure_logging, get_logger, log_success
from .objective import (
    ObjectiveHandle,
    estimate_constants,
    estimate_gradient_variance,
    estimate_smoothness,
    loss_and_grad_norm_sq,
)
from .reports import render
from .rng import RandomStream
from .stepsizes import StepsizeParams, recommended_stepsize
from .trace_io import format_float, load_trace, read_csv, render_csv, save_trace, tail_mean

logger = get_logger("cli")

SUMMARY_HEADER = ["final_grad_norm_sq", "min_grad_norm_sq", "wall_iters"]
CURVE_PATTERN = re.compile(r"^curve_gamma=(?P<gamma>.+)\.csv$")


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def _float_list(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from exc


def _batch_size(text: Optional[str]) -> Any:
    if text is None or text == "full":
        return text
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigurationError(f"--batch-size must be an integer or 'full', got {text!r}") from exc


def _add_experiment_flags(parser: argparse.ArgumentParser, sweep: bool) -> None:
    parser.add_argument("--config", type=Path, help="YAML experiment file")
    parser.add_argument("--strategy", help="strategy string, e.g. pure, pure-wait:b=4, shuffled:mode=once")
    parser.add_argument("--T", type=int, help="iteration budget")
    parser.add_argument("--batch-size", help="samples per stochastic gradient or 'full'")
    parser.add_argument("--lam", type=float, help="regularization weight")
    parser.add_argument("--s", help="comma-separated per-worker mean compute times")
    parser.add_argument("--alpha", type=float, help="synthetic label heterogeneity")
    parser.add_argument("--beta", type=float, help="synthetic feature heterogeneity")
    parser.add_argument("--n", type=int, help="number of workers")
    parser.add_argument("--m", type=int, help="samples per worker (synthetic)")
    parser.add_argument("--d", type=int, help="feature dimension")
    parser.add_argument("--data-seed", type=int, help="synthetic generator seed")
    parser.add_argument("--points", type=int, help="use this many single-sample clients")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--dataset", type=Path, help="ASGD binary dataset file")
    source.add_argument("--libsvm", type=Path, help="LibSVM text file")
    parser.add_argument("--snapshot-every", type=int, help="iterate retention cadence")
    parser.add_argument("--metrics-every", type=int, help="full-objective metric cadence")
    parser.add_argument("-o", "--output-dir", type=Path, help="output directory")
    if sweep:
        parser.add_argument("--grid", help="comma-separated stepsizes")
        parser.add_argument("--seeds", help="comma-separated seeds")
        parser.add_argument("--timing", help="timing model, or a comma-separated list to compare")
    else:
        parser.add_argument("--gamma", type=float, help="stepsize")
        parser.add_argument("--seed", type=int, help="simulation seed")
        parser.add_argument("--timing", choices=["fixed", "poisson", "normal", "uniform"])


def _overrides(args: argparse.Namespace, sweep: bool) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "strategy": args.strategy,
        "T": args.T,
        "batch_size": _batch_size(args.batch_size),
        "lam": args.lam,
        "timing.s": _float_list(args.s),
        "dataset.alpha": args.alpha,
        "dataset.beta": args.beta,
        "dataset.n": args.n,
        "dataset.m": args.m,
        "dataset.d": args.d,
        "dataset.seed": args.data_seed,
        "dataset.points": args.points,
        "snapshot_every": args.snapshot_every,
        "metrics_every": args.metrics_every,
        "output_dir": str(args.output_dir) if args.output_dir else None,
    }
    if args.dataset is not None:
        overrides.update({"dataset.source": "binary", "dataset.path": str(args.dataset)})
    if args.libsvm is not None:
        overrides.update({"dataset.source": "libsvm", "dataset.path": str(args.libsvm)})
    if sweep:
        overrides["grid"] = _float_list(args.grid)
        overrides["seeds"] = _int_list(args.seeds)
    else:
        overrides["gamma"] = args.gamma
        overrides["seeds"] = [args.seed] if args.seed is not None else None
        overrides["timing.kind"] = args.timing
    return overrides


def _parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="asgrad",
        description="Asynchronous SGD simulator and diagnostics",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Generate a synthetic dataset file")
    gen.add_argument("--alpha", type=float, default=1.0)
    gen.add_argument("--beta", type=float, default=1.0)
    gen.add_argument("--n", type=int, default=10)
    gen.add_argument("--m", type=int, default=200)
    gen.add_argument("--d", type=int, default=300)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--require-both-labels", action="store_true")
    gen.add_argument("-o", "--output", type=Path, required=True)

    run_parser = subparsers.add_parser("run", help="Simulate one configuration")
    _add_experiment_flags(run_parser, sweep=False)

    sweep_parser = subparsers.add_parser("sweep", help="Grid-search the stepsize")
    _add_experiment_flags(sweep_parser, sweep=True)

    diag = subparsers.add_parser("diagnose", help="Analyse run directories")
    diag.add_argument("runs", type=Path, nargs="+", help="run directories (one per seed)")
    diag.add_argument("-o", "--output-dir", type=Path, help="defaults to <first run>/diagnostics")
    diag.add_argument("--tau", type=int, help="correlation period (default from L and gamma)")
    diag.add_argument("--L", type=float, help="smoothness constant (default: estimated)")
    diag.add_argument("--probes", type=int, default=16, help="trajectory probe points")
    diag.add_argument("--bounded-gradients", action="store_true", help="use bounded-gradient stepsize rules")

    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SynConfig(
        alpha=args.alpha,
        beta=args.beta,
        n=args.n,
        m=args.m,
        d=args.d,
        seed=args.seed,
        require_both_labels=args.require_both_labels,
    )
    logger.info("generating Syn(%s,%s) n=%d m=%d d=%d seed=%d", cfg.alpha, cfg.beta, cfg.n, cfg.m, cfg.d, cfg.seed)
    dataset = generate_synthetic(cfg)
    path = save_dataset(args.output, dataset)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = render(
        "manifest.txt.j2",
        file=path.name,
        cfg=cfg,
        positives=int(np.sum(dataset.labels > 0)),
        negatives=int(np.sum(dataset.labels < 0)),
        digest=digest,
    )
    manifest_path = write_file_atomic(path.with_name(path.name + ".manifest.txt"), manifest)
    log_success(logger, "wrote %s and %s", path, manifest_path)
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _summary(dataset: Dataset, lam: float, trace: Trace) -> Tuple[float, float, int]:
    obj = ObjectiveHandle(dataset, lam)
    _, final = loss_and_grad_norm_sq(obj, trace.snapshots[max(trace.snapshots)])
    seen = [r.grad_norm_sq for r in trace.records if math.isfinite(r.grad_norm_sq)]
    return final, min(seen + [final]), trace.T


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides(args, sweep=False))
    if cfg.gamma is None:
        raise ConfigurationError("run needs a stepsize: pass --gamma or set gamma in the config")
    seed = cfg.seeds[0]
    dataset = build_dataset(cfg.dataset)
    run_cfg = to_run_config(cfg, dataset, cfg.gamma, seed)
    out = cfg.output_dir
    write_file_atomic(out / "run_config.yaml", dump_config(cfg.model_copy(update={"seeds": [seed]})))
    logger.info(
        "running %s gamma=%s T=%d seed=%d on %s", cfg.strategy, cfg.gamma, cfg.T, seed, dataset.describe()
    )
    try:
        trace = run(run_cfg)
    except DivergenceError as exc:
        if exc.trace is not None:
            save_trace(out, exc.trace)
            logger.warning("partial trace (%d iterations) written to %s", exc.trace.T, out)
        raise
    save_trace(out, trace)
    final, best, iters = _summary(dataset, cfg.lam, trace)
    row = (float(final), float(best), iters)
    write_file_atomic(out / "summary.csv", render_csv(SUMMARY_HEADER, [row]))
    print(",".join(format_float(v) if isinstance(v, float) else str(v) for v in row))
    log_success(logger, "trace written to %s", out)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepTask:
    config: Dict[str, Any]
    dataset: Dataset
    gamma: float
    seed: int
    timing: str
    run_dir: Path


@dataclass(frozen=True)
class SweepResult:
    timing: str
    gamma: float
    seed: int
    curve: np.ndarray
    diverged: bool


def _sweep_task(task: SweepTask) -> SweepResult:
    cfg = ExperimentConfig.model_validate(task.config)
    cfg = cfg.model_copy(update={"timing": cfg.timing.model_copy(update={"kind": task.timing})})
    run_cfg = to_run_config(cfg, task.dataset, task.gamma, task.seed)
    run_cfg.keep_gradients = False
    run_cfg.snapshot_every = max(cfg.T, 1)
    diverged = False
    try:
        trace = run(run_cfg)
    except DivergenceError as exc:
        trace, diverged = exc.trace, True
    curve = np.full(cfg.T, math.inf)
    values = [r.grad_norm_sq for r in trace.records]
    curve[: len(values)] = values
    if diverged and len(values):
        curve[len(values) - 1] = math.inf
    write_file_atomic(
        task.run_dir / "trace.csv",
        render_csv(["t", "grad_norm_sq"], [(t, float(v)) for t, v in enumerate(curve)]),
    )
    return SweepResult(task.timing, task.gamma, task.seed, curve, diverged)


def score_curves(curves: Sequence[np.ndarray]) -> float:
    """Median over seeds of the tail-window mean; ``inf`` if any seed diverged."""
    tails = [tail_mean(curve) for curve in curves]
    if any(math.isinf(v) for v in tails):
        return math.inf
    return float(np.median(tails))


def select_best(scores: Dict[float, float]) -> float:
    """Lowest score; ties go to the smaller gamma."""
    return min(sorted(scores), key=lambda gamma: scores[gamma])


def curve_filename(gamma: float) -> str:
    return f"curve_gamma={gamma!r}.csv"


def rescore_sweep(directory: Path) -> Tuple[Dict[float, float], float]:
    """Recompute scores and the best gamma from the curve files alone."""
    scores: Dict[float, float] = {}
    for path in sorted(Path(directory).glob("curve_gamma=*.csv")):
        match = CURVE_PATTERN.match(path.name)
        if match is None:
            continue
        rows = list(read_csv_any(path))
        seed_columns = [key for key in rows[0] if key.startswith("seed_")] if rows else []
        curves = [np.array([float(row[col]) for row in rows]) for col in seed_columns]
        scores[float(match.group("gamma"))] = score_curves(curves) if curves else math.inf
    if not scores:
        raise ConfigurationError(f"no curve files found in {directory}")
    return scores, select_best(scores)


def read_csv_any(path: Path) -> List[Dict[str, str]]:
    header = path.read_text(encoding="utf-8").splitlines()[0].split(",")
    return read_csv(path, header)


def _write_sweep_outputs(
    out: Path,
    cfg: ExperimentConfig,
    timing: str,
    results: Sequence[SweepResult],
) -> float:
    scores: Dict[float, float] = {}
    diverged: List[str] = []
    for gamma in cfg.grid:
        per_seed = sorted((r for r in results if r.gamma == gamma), key=lambda r: r.seed)
        header = ["t"] + [f"seed_{r.seed}" for r in per_seed]
        rows = [
            (t, *(float(r.curve[t]) for r in per_seed)) for t in range(cfg.T)
        ]
        write_file_atomic(out / curve_filename(gamma), render_csv(header, rows))
        scores[gamma] = score_curves([r.curve for r in per_seed])
        if any(r.diverged for r in per_seed):
            diverged.append(repr(gamma))
    best = select_best(scores)
    if math.isinf(scores[best]):
        logger.warning("every gamma diverged for %s/%s; reporting the smallest", cfg.strategy, timing)
    score_rows = [(repr(gamma), float(scores[gamma])) for gamma in sorted(scores)]
    write_file_atomic(out / "scores.csv", render_csv(["gamma", "score"], score_rows))
    write_file_atomic(out / "best_gamma.txt", f"{best!r}\n")
    report = render(
        "sweep_report.md.j2",
        strategy=cfg.strategy,
        timing=timing,
        T=cfg.T,
        seeds=cfg.seeds,
        scores=[{"gamma": g, "score": format_float(s)} for g, s in score_rows],
        best=repr(best),
        diverged=diverged,
    )
    write_file_atomic(out / "report.md", report)
    return best


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides(args, sweep=True))
    timings = [t.strip() for t in args.timing.split(",")] if args.timing else [cfg.timing.kind]
    for timing in timings:
        if timing not in ("fixed", "poisson", "normal", "uniform"):
            raise ConfigurationError(f"unknown timing model {timing!r}")
    settings = SweepSettings()
    dataset = build_dataset(cfg.dataset)
    errors = to_run_config(cfg, dataset, cfg.grid[0], cfg.seeds[0]).validate()
    if errors:
        raise ConfigurationError("; ".join(errors))
    out = cfg.output_dir
    payload = cfg.model_dump(mode="json")
    tasks = [
        SweepTask(
            config=payload,
            dataset=dataset,
            gamma=gamma,
            seed=seed,
            timing=timing,
            run_dir=out / "runs" / config_hash(cfg, gamma=gamma, seed=seed, timing=timing),
        )
        for timing in timings
        for gamma in cfg.grid
        for seed in cfg.seeds
    ]
    logger.info(
        "sweeping %s: %d stepsizes x %d seeds x %d timing models on %d threads",
        cfg.strategy, len(cfg.grid), len(cfg.seeds), len(timings), settings.threads,
    )
    if settings.threads == 1 or len(tasks) == 1:
        results = [_sweep_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(settings.threads, len(tasks))) as pool:
            results = list(pool.map(_sweep_task, tasks))
    results.sort(key=lambda r: (r.timing, r.gamma, r.seed))
    for timing in timings:
        target = out if len(timings) == 1 else out / timing
        best = _write_sweep_outputs(target, cfg, timing, [r for r in results if r.timing == timing])
        print(f"{timing},{best!r}")
        log_success(logger, "best gamma for %s/%s: %r", cfg.strategy, timing, best)
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _load_run_config(run_dir: Path) -> ExperimentConfig:
    return load_experiment_config(run_dir / "run_config.yaml")


def _safe_stepsize(method: str, params: StepsizeParams, bounded: bool) -> float:
    try:
        return recommended_stepsize(method, params, assume_bounded_gradients=bounded)
    except ParameterError as exc:
        logger.warning("no recommended stepsize: %s", exc)
        return math.nan


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.runs[0])
    traces = [load_trace(run_dir) for run_dir in args.runs]
    T = traces[0].T
    if any(trace.T != T for trace in traces):
        raise ConfigurationError("all runs must share the same iteration budget")
    dataset = build_dataset(cfg.dataset)
    obj = ObjectiveHandle(dataset, cfg.lam)
    spec = cfg.strategy_spec
    trace = traces[0]
    out = args.output_dir or args.runs[0] / "diagnostics"

    stats = delay_stats(trace)
    probes = trajectory_probes(trace, args.probes)
    L = args.L if args.L is not None else estimate_smoothness(obj, probes)
    zeta_sq, G = estimate_constants(obj, probes)
    batch = None if cfg.batch_size == "full" else int(cfg.batch_size)
    sigma_sq = 0.0
    if batch is not None:
        sigma_sq = estimate_gradient_variance(
            obj, probes[:4], batch, RandomStream(cfg.seeds[0], "probes")
        )
    tau = args.tau or default_correlation_period(
        L, trace.gamma, T, period_rule_for(spec.kind), n=dataset.n, b=spec.b or 1
    )
    logger.info("diagnosing %d run(s): T=%d tau=%d L=%.4g", len(traces), T, tau, L)

    received = sequence_correlation(traces, tau, "received", obj)
    assigned = sequence_correlation(traces, tau, "assigned", obj)
    nu_received = delay_variance(traces, "received", obj)
    nu_assigned = delay_variance(traces, "assigned", obj)
    _, virtual_gap = virtual_iterates(trace, tau, obj)
    _, identity_residual = assigned_virtual_iterates(trace, obj)
    F0, F1 = optimality_gaps(trace, obj)
    delay_sum, delay_sum_cap = delay_sum_check(trace)
    gamma = trace.gamma_eff

    bounds: List[Tuple[str, float]] = []
    if T > 0:
        bounds = [
            (
                "received_process_bound",
                received_process_bound(F0, L, gamma, T, sigma_sq, phi_from_report(received, T)),
            ),
            (
                "assigned_process_bound",
                assigned_process_bound(
                    F1 if math.isfinite(F1) else 0.0, L, gamma, T, sigma_sq, stats.tau_c, G,
                    phi_from_report(assigned, T),
                ),
            ),
        ]
    conditions = list(received_process_conditions(L, gamma, stats.tau_max, stats.tau_c).items())
    conditions += list(assigned_process_conditions(L, gamma, stats.tilde_tau_max, stats.tau_c).items())
    params = StepsizeParams(
        L=L, T=max(T, 1), F0=F0, F1=F1 if math.isfinite(F1) else None, sigma_sq=sigma_sq,
        zeta_sq=zeta_sq, G=G, tau_max=stats.tau_max, tau_c=stats.tau_c, n=dataset.n, b=spec.b or 1,
    )
    recommended = _safe_stepsize(spec.kind, params, args.bounded_gradients)

    rows: List[Tuple[str, float]] = [(name, float(value)) for name, value in stats.as_rows()]
    rows += [
        ("tau", float(tau)),
        ("L_hat", float(L)),
        ("zeta_sq_hat", float(zeta_sq)),
        ("G_hat", float(G)),
        ("sigma_sq_hat", float(sigma_sq)),
        ("F0_hat", float(F0)),
        ("F1_hat", float(F1)),
        ("sigma_sq_mean_received", received.sigma_sq_mean),
        ("sigma_sq_mean_assigned", assigned.sigma_sq_mean),
        ("nu_sq_received", float(nu_received)),
        ("nu_sq_assigned", float(nu_assigned)),
        ("virtual_gap_max", float(virtual_gap)),
        ("identity_max_residual", float(identity_residual)),
        ("delay_sum", float(delay_sum)),
        ("delay_sum_cap", float(delay_sum_cap)),
        ("recommended_gamma", float(recommended)),
        ("num_runs", float(len(traces))),
    ]
    rows += [(name, float(value)) for name, value in bounds]
    write_file_atomic(out / "diagnostics.csv", render_csv(["quantity", "value"], rows))
    for report in (received, assigned):
        chunk_rows = [(k, float(v)) for k, v in enumerate(report.sigma_sq_per_chunk)]
        write_file_atomic(
            out / f"sigma_sq_{report.process}.csv", render_csv(["k", "sigma_sq_k"], chunk_rows)
        )
    write_file_atomic(
        out / "report.md",
        render(
            "diagnose_report.md.j2",
            runs=[str(r) for r in args.runs],
            strategy=cfg.strategy,
            gamma=format_float(trace.gamma),
            T=T,
            tau=tau,
            delays=[(name, format_float(value)) for name, value in stats.as_rows()],
            sigma_received=format_float(received.sigma_sq_mean),
            sigma_assigned=format_float(assigned.sigma_sq_mean),
            nu_received=format_float(nu_received),
            nu_assigned=format_float(nu_assigned),
            bounds=[(name, format_float(value)) for name, value in bounds],
            conditions=conditions,
        ),
    )
    log_success(logger, "diagnostics written to %s", out)
    return 0


def read_quantities(path: Path) -> Dict[str, float]:
    """Parse a ``quantity,value`` CSV back into a mapping."""
    return {row["quantity"]: float(row["value"]) for row in read_csv(path, ["quantity", "value"])}


COMMAND_HANDLERS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = _parse_args(argv)
    configure_logging(args.verbose)
    handler = COMMAND_HANDLERS[args.command]
    try:
        return handler(args)
    except AsgradError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
