"""Monte-Carlo comparison of HiLQE against the salted Kalman filter.

A ``TrialSpec`` fixes the system, noise levels and seed.  Each trial draws its
own initial state, process noise and measurement noise from independent
counter-based streams keyed by ``(seed, trial, role)``, so adding trials never
changes earlier ones.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .errors import EstimationError, HybridError, ParameterError
from .hybrid import HybridState, HybridTrajectory, simulate, step
from .models import AslipParams, BallParams, make_aslip, make_ball
from .models.aslip import nominal_initial_state
from .skf import beliefs_to_trajectory, run_skf
from .solver import EstimationProblem, SolverConfig, solve, total_cost

SYSTEMS = ("ball", "aslip")
NOISE_SCALINGS = ("per_second", "per_step")
ROLES = {"init": 0, "process": 1, "measurement": 2}


class TruthOutOfDomain(HybridError):
    """A simulated ground truth left the regime the model describes."""


# ---------------------------------------------------------------------------
# trial specification


@dataclass(frozen=True, eq=False)
class TrialSpec:
    system: str
    seed: int
    duration: float
    dt: float
    W_cov: np.ndarray
    V_cov: np.ndarray
    P_0: np.ndarray
    x0_bar: np.ndarray
    trials: int
    mode0: int = 0
    # "per_second": W_cov is a noise intensity and each step draws W_cov * dt.
    # "per_step": each step draws W_cov as is.
    noise_scaling: str = "per_second"
    mode_window: float = 0.05  # s, half-width of the window around true events
    p0_floor: float = 1e-12  # added to P_0 before inversion when it is singular
    min_dwell: float = 0.02  # s, shortest admissible time between true events
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("W_cov", "V_cov", "P_0", "x0_bar"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        object.__setattr__(self, "params", dict(self.params))
        if self.system not in SYSTEMS:
            raise ParameterError(f"system: expected one of {SYSTEMS}, got {self.system!r}")
        if self.noise_scaling not in NOISE_SCALINGS:
            raise ParameterError(f"noise_scaling: expected one of {NOISE_SCALINGS}, got {self.noise_scaling!r}")
        if not (self.dt > 0 and self.duration > 0):
            raise ParameterError("dt and duration must be positive")
        ratio = self.duration / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ParameterError(f"duration/dt must be integral, got {ratio}")
        if self.trials < 1 or int(self.trials) != self.trials:
            raise ParameterError("trials must be a positive integer")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must fit in 64 unsigned bits")
        if self.mode_window < 0 or self.min_dwell < 0 or self.p0_floor < 0:
            raise ParameterError("mode_window, min_dwell and p0_floor must be non-negative")
        n = self.x0_bar.shape[0]
        for name, shape in (("W_cov", (n, n)), ("P_0", (n, n))):
            if getattr(self, name).shape != shape:
                raise ParameterError(f"{name}: expected shape {shape}, got {getattr(self, name).shape}")
        if self.V_cov.ndim != 2 or self.V_cov.shape[0] != self.V_cov.shape[1]:
            raise ParameterError("V_cov must be square")
        # Singular covariances are fine for generating data (e.g. exact
        # measurements); make_problem insists on invertible W_cov and V_cov.
        for name in ("W_cov", "V_cov", "P_0"):
            _require_psd(name, getattr(self, name))
        self.build()  # validates params and dimensions against the model

    @property
    def N(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def n(self) -> int:
        return self.x0_bar.shape[0]

    @property
    def process_cov(self) -> np.ndarray:
        """Covariance of the noise added at each discrete step."""
        return self.W_cov * self.dt if self.noise_scaling == "per_second" else self.W_cov.copy()

    @property
    def arrival_weight(self) -> np.ndarray:
        try:
            np.linalg.cholesky(self.P_0)
            P = self.P_0
        except np.linalg.LinAlgError:
            P = self.P_0 + self.p0_floor * np.eye(self.n)
        return np.linalg.inv(P)

    def build(self):
        """(HybridSystem, MeasurementModel) for this spec."""
        try:
            if self.system == "ball":
                sys, meas = make_ball(BallParams(**self.params))
            else:
                sys, meas = make_aslip(AslipParams(**self.params))
        except TypeError as exc:
            raise ParameterError(f"params: {exc}") from None
        if sys.n != self.n:
            raise ParameterError(f"x0_bar: {self.system} has {sys.n} states, got {self.n}")
        if meas.m != self.V_cov.shape[0]:
            raise ParameterError(f"V_cov: {self.system} has {meas.m} measurements, got {self.V_cov.shape[0]}")
        if self.mode0 not in sys.modes:
            raise ParameterError(f"mode0: {self.mode0} is not a mode of {self.system}")
        return sys, meas

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "seed": int(self.seed),
            "duration": float(self.duration),
            "dt": float(self.dt),
            "W_cov": self.W_cov.tolist(),
            "V_cov": self.V_cov.tolist(),
            "P_0": self.P_0.tolist(),
            "x0_bar": self.x0_bar.tolist(),
            "trials": int(self.trials),
            "mode0": int(self.mode0),
            "noise_scaling": self.noise_scaling,
            "mode_window": float(self.mode_window),
            "p0_floor": float(self.p0_floor),
            "min_dwell": float(self.min_dwell),
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialSpec":
        return cls(**d)

    def content_hash(self) -> str:
        blob = json.dumps({"spec": self.to_dict(), "version": __version__}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _require_spd(name: str, M: np.ndarray) -> None:
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ParameterError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ParameterError(f"{name} must be positive definite") from None


def _require_psd(name: str, M: np.ndarray) -> None:
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ParameterError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
        raise ParameterError(f"{name} must be positive semidefinite")


def default_spec(system: str, preset: str = "desk", **overrides) -> TrialSpec:
    """Experiment settings for ``system``; ``preset="paper"`` uses the
    full trial counts and durations."""
    if preset not in ("desk", "paper"):
        raise ParameterError(f"preset: expected 'desk' or 'paper', got {preset!r}")
    if system == "ball":
        d = dict(
            system="ball",
            seed=0,
            duration=1.0,
            dt=0.01,
            W_cov=0.1 * np.eye(4),
            V_cov=np.eye(2),
            P_0=1e-6 * np.eye(4),
            x0_bar=np.array([0.0, 1.0, 0.5, -5.0]),
            trials=100 if preset == "desk" else 1000,
        )
    elif system == "aslip":
        d = dict(
            system="aslip",
            seed=0,
            duration=2.5 if preset == "desk" else 5.0,
            dt=0.001,
            W_cov=0.1 * np.eye(8),
            V_cov=np.eye(5),
            P_0=1e-5 * np.eye(8),
            x0_bar=nominal_initial_state(),
            trials=10 if preset == "desk" else 100,
        )
    else:
        raise ParameterError(f"system: expected one of {SYSTEMS}, got {system!r}")
    d.update(overrides)
    return TrialSpec(**d)


# ---------------------------------------------------------------------------
# trial generation


def trial_rng(seed: int, trial: int, role: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial), ROLES[role]])))


def _gaussian(rng: np.random.Generator, cov: np.ndarray, size: int) -> np.ndarray:
    """Zero-mean samples with a possibly singular covariance, shape (size, n)."""
    lam, U = np.linalg.eigh(cov)
    L = U * np.sqrt(np.clip(lam, 0.0, None))
    return rng.standard_normal((size, cov.shape[0])) @ L.T


def check_truth(spec: TrialSpec, truth: HybridTrajectory) -> None:
    """Reject ground truths outside the model's domain.

    Events closer together than ``min_dwell`` mean the trajectory is chattering
    on a guard.  For the hopper, the hip dropping below the ground means the
    body has fallen over, which the model has no contact for.
    """
    times = [ev.t_event for ev in truth.events]
    for a, b in zip(times, times[1:]):
        if b - a < spec.min_dwell:
            raise TruthOutOfDomain(f"events at t={a:.4f} and t={b:.4f} are closer than min_dwell={spec.min_dwell}")
    if spec.system == "aslip":
        l_b = AslipParams(**spec.params).l_b
        hip_y = truth.x[:, 1] - l_b * np.cos(truth.x[:, 2])
        if hip_y.min() <= 0.0:
            i = int(np.argmin(hip_y))
            raise TruthOutOfDomain(f"hip below ground at t={truth.t[i]:.4f} (body fell over)")


def generate_trial(spec: TrialSpec, k: int, models=None) -> tuple[HybridTrajectory, np.ndarray]:
    """Ground truth and measurements for trial ``k``; ``Y`` row ``i-1`` is ``y_i``."""
    sys, meas = models if models is not None else spec.build()
    N = spec.N
    x0 = spec.x0_bar + _gaussian(trial_rng(spec.seed, k, "init"), spec.P_0, 1)[0]
    W = _gaussian(trial_rng(spec.seed, k, "process"), spec.process_cov, N)
    truth = simulate(sys, HybridState(spec.mode0, x0, 0.0), None, W, spec.dt, N)
    V = _gaussian(trial_rng(spec.seed, k, "measurement"), spec.V_cov, N)
    Y = np.array([meas.h(x) for x in truth.x[1:]]) + V
    return truth, Y


def make_problem(spec: TrialSpec, Y: np.ndarray, models=None) -> EstimationProblem:
    sys, meas = models if models is not None else spec.build()
    _require_spd("W_cov", spec.W_cov)
    _require_spd("V_cov", spec.V_cov)
    return EstimationProblem(
        sys=sys,
        meas=meas,
        Y=Y,
        dt=spec.dt,
        P_v=np.linalg.inv(spec.V_cov),
        P_w=np.linalg.inv(spec.process_cov),
        P_x=spec.arrival_weight,
        x0_bar=spec.x0_bar,
        mode0=spec.mode0,
    )


def implied_noise(prob: EstimationProblem, X: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Noise that makes an arbitrary state sequence satisfy the dynamics:
    ``w_i = x_{i+1} - f(x_i)``."""
    W = np.empty((prob.N, prob.sys.n))
    for i in range(prob.N):
        nxt, _ = step(prob.sys, HybridState(int(modes[i]), X[i], prob.time(i)), prob.u(i), None, prob.dt, index=i)
        W[i] = X[i + 1] - nxt.x
    return W


# ---------------------------------------------------------------------------
# paired runs


@dataclass
class TrialResult:
    index: int
    truth: HybridTrajectory
    Y: np.ndarray
    est_hilqe: HybridTrajectory
    est_skf: HybridTrajectory
    errors_hilqe: np.ndarray  # (N+1,) Euclidean error norm
    errors_skf: np.ndarray
    dim_errors_hilqe: np.ndarray  # (N+1, n) absolute error per state
    dim_errors_skf: np.ndarray
    mode_match_hilqe: np.ndarray  # (N+1,) bool
    mode_match_skf: np.ndarray
    window: np.ndarray  # (N+1,) bool, within mode_window of a true event
    costs_hilqe: list  # accepted costs, first entry is the initial rollout
    cost_skf: float  # SKF means scored with the same cost, nan if not evaluable
    cost_ablation: Optional[float] = None
    iterations: int = 0
    solver_reason: str = ""
    seconds: float = 0.0

    @property
    def mse_hilqe(self) -> float:
        return float(np.mean(self.errors_hilqe**2))

    @property
    def mse_skf(self) -> float:
        return float(np.mean(self.errors_skf**2))


@dataclass(frozen=True)
class TrialFailure:
    index: int
    stage: str
    message: str


@dataclass
class Comparison:
    spec: TrialSpec
    results: list[TrialResult]
    failures: list[TrialFailure]
    runtime_seconds: float = 0.0


def event_window(truth: HybridTrajectory, half_width: float) -> np.ndarray:
    mask = np.zeros(len(truth), dtype=bool)
    for ev in truth.events:
        mask |= np.abs(truth.t - ev.t_event) <= half_width + 1e-12
    return mask


_FAILURES = (HybridError, EstimationError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def run_trial(spec: TrialSpec, k: int, cfg: SolverConfig = SolverConfig(), ablation: bool = False, models=None):
    """One paired SKF / HiLQE run.  Returns a ``TrialResult`` or ``TrialFailure``."""
    t_start = time.perf_counter()
    models = models if models is not None else spec.build()
    stage = "truth"
    try:
        truth, Y = generate_trial(spec, k, models)
        check_truth(spec, truth)
        prob = make_problem(spec, Y, models)

        stage = "skf"
        beliefs = run_skf(prob, spec.V_cov, spec.process_cov, spec.P_0)
        skf = beliefs_to_trajectory(beliefs, spec.dt)
        skf_phase = np.array([b.phase for b in beliefs])

        stage = "hilqe"
        it, stats = solve(prob, cfg=cfg)
        hilqe = it.trajectory(spec.dt)

        cost_ablation = None
        if ablation:
            stage = "ablation"
            it_abl, _ = solve(prob, cfg=replace(cfg, use_saltation=False))
            cost_ablation = it_abl.J
    except _FAILURES as exc:
        return TrialFailure(k, stage, f"{type(exc).__name__}: {exc}")

    try:
        cost_skf = total_cost(prob, skf.x, implied_noise(prob, skf.x, skf.modes))
    except _FAILURES:
        cost_skf = math.nan

    d_h = hilqe.x - truth.x
    d_s = skf.x - truth.x
    true_phase = truth.phase_index()
    return TrialResult(
        index=k,
        truth=truth,
        Y=Y,
        est_hilqe=hilqe,
        est_skf=skf,
        errors_hilqe=np.linalg.norm(d_h, axis=1),
        errors_skf=np.linalg.norm(d_s, axis=1),
        dim_errors_hilqe=np.abs(d_h),
        dim_errors_skf=np.abs(d_s),
        mode_match_hilqe=it.phase() == true_phase,
        mode_match_skf=skf_phase == true_phase,
        window=event_window(truth, spec.mode_window),
        costs_hilqe=list(stats.costs),
        cost_skf=cost_skf,
        cost_ablation=cost_ablation,
        iterations=stats.iterations,
        solver_reason=stats.reason,
        seconds=time.perf_counter() - t_start,
    )


_worker_models: dict = {}


def _worker(args):
    spec_dict, k, cfg, ablation = args
    spec = TrialSpec.from_dict(spec_dict)
    key = json.dumps({"system": spec.system, "params": spec.params}, sort_keys=True)
    if key not in _worker_models:
        _worker_models[key] = spec.build()
    return run_trial(spec, k, cfg, ablation, _worker_models[key])


def run_comparison(
    spec: TrialSpec,
    cfg: SolverConfig = SolverConfig(),
    jobs: int = 1,
    ablation: bool = False,
    trial_indices: Optional[Sequence[int]] = None,
    progress=None,
) -> Comparison:
    """Run every trial of ``spec``.  Failures are collected, not raised.

    Results come back in trial order whatever ``jobs`` is, and each trial only
    depends on its own index, so the output does not depend on ``jobs``.
    """
    t0 = time.perf_counter()
    indices = list(range(spec.trials)) if trial_indices is None else list(trial_indices)
    tasks = [(spec.to_dict(), k, cfg, ablation) for k in indices]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = []
            for out in pool.map(_worker, tasks):
                outcomes.append(out)
                if progress:
                    progress(out)
    else:
        models = spec.build()
        outcomes = []
        for _, k, _, _ in tasks:
            out = run_trial(spec, k, cfg, ablation, models)
            outcomes.append(out)
            if progress:
                progress(out)
    results = [o for o in outcomes if isinstance(o, TrialResult)]
    failures = [o for o in outcomes if isinstance(o, TrialFailure)]
    return Comparison(spec, results, failures, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsSummary:
    t: np.ndarray
    mean_err_hilqe: np.ndarray
    mean_err_skf: np.ndarray
    dim_err_hilqe: np.ndarray  # (N+1, n)
    dim_err_skf: np.ndarray
    improvement_pct: np.ndarray  # per timestep, nan where the SKF error vanishes
    median_mse_improvement_pct: float = math.nan
    pooled_mse_improvement_pct: float = math.nan
    peak_timestep_improvement_pct: float = math.nan
    peak_timestep: int = -1
    mode_accuracy_hilqe: float = math.nan
    mode_accuracy_skf: float = math.nan
    mode_accuracy_diff_ci: tuple = (math.nan, math.nan)  # bootstrap 5th / 95th percentile
    impact_window_fraction: float = math.nan  # share of window steps with hilqe <= skf
    n_trials: int = 0
    n_failures: int = 0
    cost_violations: int = 0
    event_count_match: float = math.nan
    hilqe_below_skf_cost: float = math.nan
    ablation_worse_fraction: float = math.nan

    def scalars(self) -> dict:
        keys = [
            "median_mse_improvement_pct",
            "pooled_mse_improvement_pct",
            "peak_timestep_improvement_pct",
            "peak_timestep",
            "mode_accuracy_hilqe",
            "mode_accuracy_skf",
            "impact_window_fraction",
            "n_trials",
            "n_failures",
            "cost_violations",
            "event_count_match",
            "hilqe_below_skf_cost",
            "ablation_worse_fraction",
        ]
        out = {k: getattr(self, k) for k in keys}
        out["mode_accuracy_diff_ci"] = list(self.mode_accuracy_diff_ci)
        return out


def improvement(e_skf, e_hilqe, floor: float = 1e-12):
    """``100 (e_skf - e_hilqe) / e_skf``; positive means HiLQE is better.
    Entries with ``e_skf < floor`` come back as nan."""
    e_skf = np.asarray(e_skf, dtype=float)
    e_hilqe = np.asarray(e_hilqe, dtype=float)
    out = np.full(np.broadcast(e_skf, e_hilqe).shape, np.nan)
    ok = np.broadcast_to(e_skf >= floor, out.shape)
    np.divide(100.0 * (e_skf - e_hilqe), e_skf, out=out, where=ok)
    return out if out.ndim else float(out)


def strictly_decreasing(costs: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(costs, costs[1:]))


def bootstrap_mean_ci(values: np.ndarray, samples: int = 2000, seed: int = 0, q=(5.0, 95.0)) -> tuple:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (math.nan, math.nan)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xB007])))
    idx = rng.integers(0, values.size, size=(samples, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, q)
    return (float(lo), float(hi))


def aggregate_metrics(
    results: Sequence[TrialResult],
    n_failures: int = 0,
    bootstrap_samples: int = 2000,
    bootstrap_seed: int = 0,
) -> MetricsSummary:
    if not results:
        raise ValueError("aggregate_metrics needs at least one trial result")
    results = sorted(results, key=lambda r: r.index)
    t = results[0].truth.t
    Eh = np.array([r.errors_hilqe for r in results])
    Es = np.array([r.errors_skf for r in results])
    mean_h, mean_s = Eh.mean(axis=0), Es.mean(axis=0)
    curve = improvement(mean_s, mean_h)
    finite = np.isfinite(curve)
    peak_i = int(np.nanargmax(curve)) if finite.any() else -1

    mse_h = np.array([r.mse_hilqe for r in results])
    mse_s = np.array([r.mse_skf for r in results])
    per_trial = improvement(mse_s, mse_h)

    win = np.array([r.window for r in results])
    acc_h = [r.mode_match_hilqe[r.window].mean() for r in results if r.window.any()]
    acc_s = [r.mode_match_skf[r.window].mean() for r in results if r.window.any()]
    match_h = np.array([r.mode_match_hilqe for r in results])
    match_s = np.array([r.mode_match_skf for r in results])
    n_win = win.sum()

    any_win = win.any(axis=0)
    frac = float(np.mean(mean_h[any_win] <= mean_s[any_win])) if any_win.any() else math.nan

    skf_costs = np.array([r.cost_skf for r in results])
    final = np.array([r.costs_hilqe[-1] for r in results])
    ok = np.isfinite(skf_costs)
    abl = [(r.cost_ablation, r.costs_hilqe[-1]) for r in results if r.cost_ablation is not None]

    return MetricsSummary(
        t=t.copy(),
        mean_err_hilqe=mean_h,
        mean_err_skf=mean_s,
        dim_err_hilqe=np.mean([r.dim_errors_hilqe for r in results], axis=0),
        dim_err_skf=np.mean([r.dim_errors_skf for r in results], axis=0),
        improvement_pct=curve,
        median_mse_improvement_pct=float(np.nanmedian(per_trial)) if np.isfinite(per_trial).any() else math.nan,
        pooled_mse_improvement_pct=improvement(mse_s.mean(), mse_h.mean()),
        peak_timestep_improvement_pct=float(curve[peak_i]) if peak_i >= 0 else math.nan,
        peak_timestep=peak_i,
        mode_accuracy_hilqe=float(match_h[win].sum() / n_win) if n_win else math.nan,
        mode_accuracy_skf=float(match_s[win].sum() / n_win) if n_win else math.nan,
        mode_accuracy_diff_ci=bootstrap_mean_ci(np.subtract(acc_h, acc_s), bootstrap_samples, bootstrap_seed),
        impact_window_fraction=frac,
        n_trials=len(results),
        n_failures=n_failures,
        cost_violations=sum(not strictly_decreasing(r.costs_hilqe) for r in results),
        event_count_match=float(np.mean([len(r.est_hilqe.events) == len(r.truth.events) for r in results])),
        hilqe_below_skf_cost=float(np.mean(final[ok] < skf_costs[ok])) if ok.any() else math.nan,
        ablation_worse_fraction=float(np.mean([a > h for a, h in abl])) if abl else math.nan,
    )


# ---------------------------------------------------------------------------
# persistence


def _f(v) -> str:
    return repr(float(v))


def write_metrics_csv(summary: MetricsSummary, path) -> None:
    n = summary.dim_err_hilqe.shape[1]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(
            ["timestep", "t", "mean_err_hilqe", "mean_err_skf", "improvement_pct"]
            + [c for j in range(n) for c in (f"err_hilqe_d{j}", f"err_skf_d{j}")]
        )
        for i in range(len(summary.t)):
            row = [i, _f(summary.t[i]), _f(summary.mean_err_hilqe[i]), _f(summary.mean_err_skf[i]), _f(summary.improvement_pct[i])]
            for j in range(n):
                row += [_f(summary.dim_err_hilqe[i, j]), _f(summary.dim_err_skf[i, j])]
            wr.writerow(row)


def read_metrics_csv(path) -> MetricsSummary:
    """Curves from ``metrics.csv``; the scalar fields are left at their defaults."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    header, body = rows[0], rows[1:]
    need = ["timestep", "t", "mean_err_hilqe", "mean_err_skf", "improvement_pct"]
    if header[:5] != need or (len(header) - 5) % 2:
        raise ValueError(f"{path}: unexpected header {header[:5]}")
    if not body:
        raise ValueError(f"{path}: no rows")
    A = np.array([[float(v) for v in r] for r in body])
    return MetricsSummary(
        t=A[:, 1],
        mean_err_hilqe=A[:, 2],
        mean_err_skf=A[:, 3],
        improvement_pct=A[:, 4],
        dim_err_hilqe=A[:, 5::2],
        dim_err_skf=A[:, 6::2],
    )


def write_trial_csv(r: TrialResult, path) -> None:
    n = r.truth.x.shape[1]
    m = r.Y.shape[1]
    phase = r.truth.phase_index()
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(
            ["timestep", "t", "mode_true", "phase_true"]
            + [f"x_true_{j}" for j in range(n)]
            + [f"y_{j}" for j in range(m)]
            + ["mode_hilqe"] + [f"x_hilqe_{j}" for j in range(n)]
            + ["mode_skf"] + [f"x_skf_{j}" for j in range(n)]
            + ["err_hilqe", "err_skf", "match_hilqe", "match_skf", "in_window"]
        )
        for i in range(len(r.truth)):
            y = [""] * m if i == 0 else [_f(v) for v in r.Y[i - 1]]
            wr.writerow(
                [i, _f(r.truth.t[i]), int(r.truth.modes[i]), int(phase[i])]
                + [_f(v) for v in r.truth.x[i]]
                + y
                + [int(r.est_hilqe.modes[i])] + [_f(v) for v in r.est_hilqe.x[i]]
                + [int(r.est_skf.modes[i])] + [_f(v) for v in r.est_skf.x[i]]
                + [_f(r.errors_hilqe[i]), _f(r.errors_skf[i])]
                + [int(r.mode_match_hilqe[i]), int(r.mode_match_skf[i]), int(r.window[i])]
            )


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return _json_safe(v.item())
    return v


def export_results(
    run: Comparison,
    summary: Optional[MetricsSummary],
    out_dir: Union[str, os.PathLike],
) -> list[Path]:
    """Write per-trial CSVs, ``metrics.csv``, ``summary.json`` and
    ``manifest.json``.  Returns the written paths."""
    out = Path(out_dir)
    written: list[Path] = []
    try:
        (out / "trials").mkdir(parents=True, exist_ok=True)
        for r in sorted(run.results, key=lambda r: r.index):
            p = out / "trials" / f"trial_{r.index:04d}.csv"
            write_trial_csv(r, p)
            written.append(p)
        if summary is not None:
            p = out / "metrics.csv"
            write_metrics_csv(summary, p)
            written.append(p)
            p = out / "summary.json"
            p.write_text(json.dumps(_json_safe(summary.scalars()), indent=2, sort_keys=True) + "\n")
            written.append(p)
        trial_ids = list(range(run.spec.trials))
        manifest = {
            "spec": run.spec.to_dict(),
            "content_hash": run.spec.content_hash(),
            "version": __version__,
            "seeds": [{"trial": k, "seed": int(run.spec.seed)} for k in trial_ids],
            "completed": [r.index for r in sorted(run.results, key=lambda r: r.index)],
            "failures": [{"trial": f.index, "stage": f.stage, "message": f.message} for f in run.failures],
            "n_failures": len(run.failures),
            "files": [str(p.relative_to(out)) for p in written],
        }
        p = out / "manifest.json"
        p.write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n")
        written.append(p)
    except OSError as exc:
        raise OSError(f"could not write results under {out}: {exc}") from exc
    return written
