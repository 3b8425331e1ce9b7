"""Command-line entry point: ``hilqe {simulate,estimate,bench,plot}``.

Settings resolve in three layers: per-system defaults (``--preset``), then a
JSON file (``--config``), then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EstimationError, HybridError, ParameterError
from .harness import (
    SYSTEMS,
    TrialFailure,
    TrialSpec,
    aggregate_metrics,
    check_truth,
    default_spec,
    export_results,
    generate_trial,
    make_problem,
    read_metrics_csv,
    run_comparison,
)
from .skf import run_skf, write_beliefs_csv
from .solver import SolverConfig, solve, write_solver_log

log = logging.getLogger("hilqe")

OUT_ENV = "HILQE_OUT"
_SPEC_KEYS = {f.name for f in dataclasses.fields(TrialSpec)} - {"system", "params"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}
_TOP_KEYS = _SPEC_KEYS | {"system", "preset", "ball", "aslip", "solver", "out", "jobs", "estimator", "ablation", "trial", "verbosity"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    spec: TrialSpec
    solver: SolverConfig
    out: Path
    jobs: int = 1
    estimator: str = "both"
    ablation: bool = False
    trial: int = 0
    verbosity: int = 0


def _matrix(value, n: int, path: str) -> np.ndarray:
    """Scalar -> scalar * I, flat list -> diagonal, nested list -> matrix."""
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number or numeric array") from None
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1 and a.shape[0] == n:
        return np.diag(a)
    if a.shape == (n, n):
        return a
    raise ConfigError(f"{path}: expected a scalar, {n} diagonal entries or an {n}x{n} matrix, got shape {a.shape}")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"config.{unknown[0]}: unknown key")
    return data


def parse_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_json(args.config) if getattr(args, "config", None) else {}

    system = args.system or file_cfg.get("system")
    if system is None:
        raise ConfigError("system: required (pass --system or set \"system\" in the config file)")
    if system not in SYSTEMS:
        raise ConfigError(f"system: expected one of {', '.join(SYSTEMS)}, got {system!r}")
    preset = args.preset or file_cfg.get("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"preset: expected desk or paper, got {preset!r}")

    base = default_spec(system, preset).to_dict()
    n = len(base["x0_bar"])
    for key in _SPEC_KEYS & set(file_cfg):
        base[key] = file_cfg[key]
    params = file_cfg.get(system, {})
    if not isinstance(params, dict):
        raise ConfigError(f"config.{system}: expected an object of model parameters")
    base["params"] = params

    flags = {
        "trials": args.trials,
        "seed": args.seed,
        "duration": args.duration,
        "dt": args.dt,
        "mode_window": None if args.mode_window_ms is None else args.mode_window_ms / 1000.0,
    }
    base.update({k: v for k, v in flags.items() if v is not None})

    for key in ("W_cov", "P_0"):
        base[key] = _matrix(base[key], n, f"config.{key}")
    m = np.array(default_spec(system).V_cov).shape[0]
    base["V_cov"] = _matrix(base["V_cov"], m, "config.V_cov")
    try:
        base["x0_bar"] = np.array(base["x0_bar"], dtype=float).reshape(n)
    except ValueError:
        raise ConfigError(f"config.x0_bar: expected {n} numbers") from None
    try:
        spec = TrialSpec(system=system, **{k: v for k, v in base.items() if k != "system"})
    except ParameterError as exc:
        raise ConfigError(f"config.{exc}") from None
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None

    solver_cfg = file_cfg.get("solver", {})
    unknown = sorted(set(solver_cfg) - _SOLVER_KEYS)
    if unknown:
        raise ConfigError(f"config.solver.{unknown[0]}: unknown key")
    try:
        solver = SolverConfig(**solver_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.solver: {exc}") from None

    out = args.out or file_cfg.get("out")
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "runs")) / system / args.command
    jobs = args.jobs if args.jobs is not None else int(file_cfg.get("jobs", 1))
    if jobs < 1:
        raise ConfigError("jobs: must be at least 1")
    estimator = args.estimator or file_cfg.get("estimator", "both")
    if estimator not in ("hilqe", "skf", "both"):
        raise ConfigError(f"estimator: expected hilqe, skf or both, got {estimator!r}")
    trial = getattr(args, "trial", None)
    trial = int(file_cfg.get("trial", 0)) if trial is None else trial
    return RunConfig(
        command=args.command,
        spec=spec,
        solver=solver,
        out=Path(out),
        jobs=jobs,
        estimator=estimator,
        ablation=bool(getattr(args, "ablation", False) or file_cfg.get("ablation", False)),
        trial=trial,
        verbosity=args.verbose - args.quiet + int(file_cfg.get("verbosity", 0)),
    )


# ---------------------------------------------------------------------------
# subcommands


def _write_measurements(Y: np.ndarray, dt: float, path: Path) -> None:
    with path.open("w") as fh:
        fh.write(",".join(["timestep", "t"] + [f"y_{j}" for j in range(Y.shape[1])]) + "\n")
        for i, y in enumerate(Y, start=1):
            fh.write(",".join([str(i), repr(i * dt)] + [repr(float(v)) for v in y]) + "\n")


def cmd_simulate(cfg: RunConfig) -> int:
    spec = cfg.spec
    truth, Y = generate_trial(spec, cfg.trial)
    cfg.out.mkdir(parents=True, exist_ok=True)
    truth.to_csv(cfg.out / "truth.csv", cfg.out / "events.csv")
    _write_measurements(Y, spec.dt, cfg.out / "measurements.csv")
    log.info("simulated %s trial %d: %d events, wrote %s", spec.system, cfg.trial, len(truth.events), cfg.out)
    print(f"{len(truth.events)} events over {spec.duration:g} s -> {cfg.out}")
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    spec = cfg.spec
    models = spec.build()
    truth, Y = generate_trial(spec, cfg.trial, models)
    check_truth(spec, truth)
    prob = make_problem(spec, Y, models)
    cfg.out.mkdir(parents=True, exist_ok=True)
    truth.to_csv(cfg.out / "truth.csv", cfg.out / "events.csv")
    _write_measurements(Y, spec.dt, cfg.out / "measurements.csv")
    parts = []
    if cfg.estimator in ("skf", "both"):
        beliefs = run_skf(prob, spec.V_cov, spec.process_cov, spec.P_0)
        write_beliefs_csv(beliefs, cfg.out / "skf.csv")
        X = np.array([b.mean.x for b in beliefs])
        parts.append(f"skf mse {np.mean(np.sum((X - truth.x) ** 2, axis=1)):.6g}")
    if cfg.estimator in ("hilqe", "both"):
        it, stats = solve(prob, cfg=cfg.solver)
        traj = it.trajectory(spec.dt)
        traj.to_csv(cfg.out / "hilqe.csv", cfg.out / "hilqe_events.csv")
        write_solver_log(stats, cfg.out / "solver_log.csv")
        parts.append(f"hilqe mse {np.mean(np.sum((it.X - truth.x) ** 2, axis=1)):.6g} ({stats.iterations} iterations, {stats.reason})")
    print("; ".join(parts) + f" -> {cfg.out}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    from .plotting import render_plots

    if cfg.estimator != "both":
        raise ConfigError("estimator: bench always compares both estimators")
    spec = cfg.spec

    def progress(out):
        if isinstance(out, TrialFailure):
            log.warning("trial %d failed during %s: %s", out.index, out.stage, out.message)
        else:
            log.info("trial %d done in %.2f s", out.index, out.seconds)

    run = run_comparison(spec, cfg.solver, jobs=cfg.jobs, ablation=cfg.ablation, progress=progress)
    summary = aggregate_metrics(run.results, len(run.failures), bootstrap_seed=spec.seed) if run.results else None
    export_results(run, summary, cfg.out)
    log.info("bench finished in %.1f s", run.runtime_seconds)
    if summary is not None:
        render_plots(summary, cfg.out)
        print(
            f"{summary.n_trials} trials: median MSE improvement {summary.median_mse_improvement_pct:.2f}%, "
            f"peak {summary.peak_timestep_improvement_pct:.2f}% -> {cfg.out}"
        )
    if run.failures:
        print(f"hilqe: error: {len(run.failures)} of {spec.trials} trials failed (see {cfg.out / 'manifest.json'})", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    from .plotting import render_plots

    src = Path(args.input)
    summary = read_metrics_csv(src)
    out = Path(args.out) if args.out else src.parent
    paths = render_plots(summary, out)
    print(" ".join(str(p) for p in paths))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--system", choices=SYSTEMS, help="hybrid system to run")
    common.add_argument("--config", metavar="PATH", help="JSON config file; flags override its values")
    common.add_argument("--preset", choices=("desk", "paper"), help="default trial count and duration (default: desk)")
    common.add_argument("--trials", type=int, help="number of Monte-Carlo trials")
    common.add_argument("--seed", type=int, help="base seed (64-bit unsigned)")
    common.add_argument("--duration", type=float, help="trial length in seconds")
    common.add_argument("--dt", type=float, help="sample interval in seconds")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or ./runs, then <system>/<command>)")
    common.add_argument("--jobs", type=int, help="worker processes for bench (default: 1)")
    common.add_argument("--estimator", choices=("hilqe", "skf", "both"), help="estimators to run (default: both)")
    common.add_argument("--mode-window-ms", type=float, help="half-width of the window around true events, in ms (default: 50)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    common.add_argument("-q", "--quiet", action="count", default=0, help="less log output")

    p = argparse.ArgumentParser(prog="hilqe", description="Hybrid iterative LQ estimation and salted Kalman filtering.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate one trial: ground truth and measurements")
    s.add_argument("--trial", type=int, help="trial index within the seed (default: 0)")
    s = sub.add_parser("estimate", parents=[common], help="estimate one trial with HiLQE and/or the SKF")
    s.add_argument("--trial", type=int, help="trial index within the seed (default: 0)")
    s = sub.add_parser("bench", parents=[common], help="Monte-Carlo comparison, metrics and plots")
    s.add_argument("--ablation", action="store_true", help="also solve with the reset Jacobian in place of the saltation matrix")
    s = sub.add_parser("plot", help="re-render charts from an existing metrics.csv")
    s.add_argument("--in", dest="input", required=True, metavar="PATH", help="metrics.csv written by bench")
    s.add_argument("--out", metavar="DIR", help="output directory (default: next to the input)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            logging.basicConfig(level=logging.WARNING, format="%(message)s")
            return cmd_plot(args)
        cfg = parse_config(args)
        level = logging.WARNING - 10 * cfg.verbosity
        logging.basicConfig(level=max(logging.DEBUG, min(logging.ERROR, level)), format="%(levelname)s %(message)s")
        return {"simulate": cmd_simulate, "estimate": cmd_estimate, "bench": cmd_bench}[cfg.command](cfg)
    except ConfigError as exc:
        print(f"hilqe: error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, ValueError, OSError, HybridError, EstimationError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hilqe: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
