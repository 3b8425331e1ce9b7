"""Hybrid iterative linear-quadratic estimation (HiLQE).

Decision variables are the initial state ``x_0`` and the additive process
noises ``w_0..w_{N-1}``; states follow by rolling the hybrid dynamics forward,
so every iterate is dynamically feasible.  The cost is

    1/2 |x_0 - xbar_0|^2_{P_x} + sum_{i=1..N} 1/2 |h(x_i) - y_i|^2_{P_v} + 1/2 |w_{i-1}|^2_{P_w}

Measurement ``y_i`` (row ``i - 1`` of ``Y``) is attached to ``x_i``; ``x_0``
only carries the arrival term.  The backward pass is the usual iLQR/DDP
recursion on the noise, with the step Jacobians left-multiplied by the
saltation matrix on steps that contained an event.  The forward pass rolls the
hybrid system out with noise ``w_i - alpha k_i - K_i dx_i`` where ``dx_i`` is
formed by reference extension whenever the new rollout and the previous
iterate sit on different sides of an event.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    HybridError,
    NoEventFound,
    NonPositiveQww,
    RolloutDiverged,
    SingularValueHessian,
)
from .hybrid import EventRecord, HybridState, HybridSystem, HybridTrajectory, flow, flow_jacobian, phase_index, step
from .models.base import MeasurementModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimationProblem:
    sys: HybridSystem
    meas: MeasurementModel
    Y: np.ndarray  # (N, m), row i-1 holds y_i
    dt: float
    P_v: np.ndarray  # inverse measurement covariance
    P_w: np.ndarray  # inverse process covariance
    P_x: np.ndarray  # inverse arrival covariance
    x0_bar: np.ndarray
    mode0: int
    U: Optional[np.ndarray] = None
    t0: float = 0.0

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "x0_bar", np.asarray(self.x0_bar, dtype=float))
        if Y.shape[0] < 1:
            raise ValueError("need at least one measurement")
        n, m = self.sys.n, self.meas.m
        for name, P, dim in (("P_v", self.P_v, m), ("P_w", self.P_w, n), ("P_x", self.P_x, n)):
            P = np.asarray(P, dtype=float)
            if P.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim}, got {P.shape}")
            if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
            object.__setattr__(self, name, P)
        if Y.shape[1] != m:
            raise ValueError(f"measurements have dimension {Y.shape[1]}, model expects {m}")

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    def u(self, i: int):
        return None if self.U is None else self.U[i]

    def time(self, i: int) -> float:
        return self.t0 + i * self.dt


@dataclass
class SolverIterate:
    X: np.ndarray  # (N+1, n)
    W: np.ndarray  # (N, n)
    modes: np.ndarray  # (N+1,)
    events: tuple[EventRecord, ...]
    J: float

    def phase(self) -> np.ndarray:
        return phase_index(self.events, self.X.shape[0])

    def trajectory(self, dt: float, t0: float = 0.0) -> HybridTrajectory:
        t = t0 + dt * np.arange(self.X.shape[0])
        return HybridTrajectory(t, self.modes.copy(), self.X.copy(), tuple(self.events), dt)


@dataclass(frozen=True)
class CostGradients:
    l_x: np.ndarray
    l_xx: np.ndarray
    l_w: Optional[np.ndarray] = None
    l_ww: Optional[np.ndarray] = None
    l_xw: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ValueExpansion:
    V_x: np.ndarray  # (N+1, n)
    V_xx: np.ndarray  # (N+1, n, n)


@dataclass(frozen=True)
class GainSchedule:
    K: np.ndarray  # (N, n, n)
    k: np.ndarray  # (N, n)
    dJ: float  # sum of Q_w^T k_i
    dx0: np.ndarray  # full-step initial point update
    expected_decrease: float  # quadratic-model decrease at alpha = 1


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 100
    max_line_search_iters: int = 16  # halvings of alpha after the full step
    cost_decrease_tol: float = 1e-6  # relative to max(1, J)
    mu_min: float = 1e-8
    mu_max: float = 1e4
    mu_scale: float = 10.0
    divergence_bound: float = 1e6
    use_saltation: bool = True  # False swaps in the reset Jacobian (ablation)

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.max_line_search_iters < 0:
            raise ValueError("iteration limits must be positive")
        if not (0 < self.mu_min <= self.mu_max and self.mu_scale > 1 and self.cost_decrease_tol > 0):
            raise ValueError("invalid regularization or tolerance settings")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    J: float
    dJ_expected: float
    alpha: float
    n_events: int


@dataclass
class SolveStats:
    iterations: int = 0
    costs: list[float] = field(default_factory=list)
    log: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    backward_passes: int = 0
    forward_passes: int = 0
    rejected_rollouts: int = 0


# ---------------------------------------------------------------------------
# cost


def total_cost(prob: EstimationProblem, X: np.ndarray, W: np.ndarray) -> float:
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.shape[0] != prob.N + 1 or W.shape[0] != prob.N:
        raise ValueError(f"expected {prob.N + 1} states and {prob.N} noises, got {X.shape[0]} and {W.shape[0]}")
    d0 = X[0] - prob.x0_bar
    R = np.array([prob.meas.h(x) for x in X[1:]]) - prob.Y
    J = d0 @ prob.P_x @ d0
    J += np.einsum("ij,jk,ik->", R, prob.P_v, R)
    J += np.einsum("ij,jk,ik->", W, prob.P_w, W)
    return 0.5 * float(J)


def stage_grad(prob: EstimationProblem, x: np.ndarray, w: np.ndarray, y: np.ndarray) -> CostGradients:
    """Gauss-Newton expansion of one measurement + noise term."""
    H = prob.meas.H(x)
    r = prob.meas.h(x) - y
    HtP = H.T @ prob.P_v
    n = prob.sys.n
    return CostGradients(HtP @ r, HtP @ H, prob.P_w @ w, prob.P_w, np.zeros((n, n)))


def init_grad(prob: EstimationProblem, x0: np.ndarray, w0: np.ndarray) -> CostGradients:
    n = prob.sys.n
    return CostGradients(prob.P_x @ (x0 - prob.x0_bar), prob.P_x, prob.P_w @ w0, prob.P_w, np.zeros((n, n)))


def term_grad(prob: EstimationProblem, xN: np.ndarray, yN: np.ndarray) -> CostGradients:
    H = prob.meas.H(xN)
    HtP = H.T @ prob.P_v
    return CostGradients(HtP @ (prob.meas.h(xN) - yN), HtP @ H)


# ---------------------------------------------------------------------------
# rollouts


def rollout(prob: EstimationProblem, x0: np.ndarray, W: np.ndarray) -> SolverIterate:
    """Feasible iterate generated by ``(x_0, W)``."""
    N, n = prob.N, prob.sys.n
    X = np.empty((N + 1, n))
    modes = np.empty(N + 1, dtype=int)
    X[0] = x0
    modes[0] = prob.mode0
    events = []
    s = HybridState(prob.mode0, np.asarray(x0, dtype=float), prob.t0)
    for i in range(N):
        s, ev = step(prob.sys, HybridState(s.mode, s.x, prob.time(i)), prob.u(i), W[i], prob.dt, index=i)
        X[i + 1] = s.x
        modes[i + 1] = s.mode
        if ev is not None:
            events.append(ev)
    W = np.array(W, dtype=float)
    return SolverIterate(X, W, modes, tuple(events), total_cost(prob, X, W))


def initial_iterate(prob: EstimationProblem) -> SolverIterate:
    """Noise-free rollout from the prior mean."""
    return rollout(prob, prob.x0_bar, np.zeros((prob.N, prob.sys.n)))


# ---------------------------------------------------------------------------
# backward pass


def _regularized_cholesky(Q: np.ndarray, cfg: SolverConfig, exc=NonPositiveQww) -> np.ndarray:
    try:
        np.linalg.cholesky(Q)
        return Q
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(Q.shape[0])
    mu = cfg.mu_min
    while mu <= cfg.mu_max:
        Qr = Q + mu * eye
        try:
            np.linalg.cholesky(Qr)
            log.debug("regularized with mu=%g", mu)
            return Qr
        except np.linalg.LinAlgError:
            mu *= cfg.mu_scale
    raise exc(f"matrix not positive definite with regularization up to mu={cfg.mu_max:g}")


def step_jacobians(prob: EstimationProblem, it: SolverIterate, i: int, event: Optional[EventRecord], cfg: SolverConfig):
    """``(A, B_w)`` of step ``i``, composed with the event map if the step had one.

    The event is treated as occurring at the end of the step: ``A`` is the flow
    Jacobian of the pre-event mode over the whole step.
    """
    A, Bw = flow_jacobian(prob.sys, int(it.modes[i]), prob.time(i), it.X[i], prob.u(i), prob.dt, check_events=False)
    if event is not None:
        if cfg.use_saltation:
            S = event.salt
        else:
            tr = _transition(prob.sys, event)
            S = tr.reset_jacobian(event.t_event, event.x_minus)[1]
        A = S @ A
        Bw = S @ Bw
    return A, Bw


def _transition(sys: HybridSystem, ev: EventRecord):
    for tr in sys.outgoing(ev.source):
        if tr.target == ev.target:
            return tr
    raise NoEventFound(f"system has no transition {ev.source}->{ev.target}")


def backward_pass(prob: EstimationProblem, it: SolverIterate, cfg: SolverConfig = SolverConfig()):
    N, n = prob.N, prob.sys.n
    V_x = np.empty((N + 1, n))
    V_xx = np.empty((N + 1, n, n))
    K = np.empty((N, n, n))
    k = np.empty((N, n))
    term = term_grad(prob, it.X[N], prob.Y[N - 1])
    V_x[N] = term.l_x
    V_xx[N] = term.l_xx
    by_step = {ev.step_index: ev for ev in it.events}
    dJ = 0.0
    for i in range(N - 1, -1, -1):
        if i == 0:
            l = init_grad(prob, it.X[0], it.W[0])
        else:
            l = stage_grad(prob, it.X[i], it.W[i], prob.Y[i - 1])
        A, Bw = step_jacobians(prob, it, i, by_step.get(i), cfg)
        Vx1, Vxx1 = V_x[i + 1], V_xx[i + 1]
        AtV = A.T @ Vxx1
        BtV = Bw.T @ Vxx1
        Q_x = l.l_x + A.T @ Vx1
        Q_w = l.l_w + Bw.T @ Vx1
        Q_xx = l.l_xx + AtV @ A
        Q_ww = l.l_ww + BtV @ Bw
        Q_xw = l.l_xw + AtV @ Bw
        Q_ww = _regularized_cholesky(0.5 * (Q_ww + Q_ww.T), cfg)
        sol = np.linalg.solve(Q_ww, np.column_stack([Q_w, Q_xw.T]))
        k[i] = sol[:, 0]
        K[i] = sol[:, 1:]
        V_x[i] = Q_x - Q_xw @ k[i]
        Vxx = Q_xx - Q_xw @ K[i]
        V_xx[i] = 0.5 * (Vxx + Vxx.T)
        dJ += float(Q_w @ k[i])
    dx0 = initial_point_update(V_x[0], V_xx[0], 1.0, cfg)
    expected = 0.5 * dJ - 0.5 * float(V_x[0] @ dx0)
    return ValueExpansion(V_x, V_xx), GainSchedule(K, k, dJ, dx0, expected)


def initial_point_update(V_x0: np.ndarray, V_xx0: np.ndarray, alpha: float, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Newton step on the arrival value function, scaled by ``alpha``."""
    V_x0 = np.atleast_1d(np.asarray(V_x0, dtype=float))
    V_xx0 = np.atleast_2d(np.asarray(V_xx0, dtype=float))
    if not np.any(V_x0):
        return np.zeros_like(V_x0)
    Vr = _regularized_cholesky(0.5 * (V_xx0 + V_xx0.T), cfg, exc=SingularValueHessian)
    return -alpha * np.linalg.solve(Vr, V_x0)


# ---------------------------------------------------------------------------
# forward pass


def reference_extension(
    sys: HybridSystem,
    prev: SolverIterate,
    state: HybridState,
    i: int,
    new_events: Sequence[EventRecord],
    dt: float,
    u=None,
    prev_phase: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Deviation of the new rollout state from the previous iterate at sample ``i``.

    Trajectories are compared by hybrid phase (number of events so far), which
    also covers single-mode systems with self-transitions.  When the phases
    agree the plain difference is returned.  If the new rollout is past an
    event the reference has not reached yet, the reference is carried across
    that event to first order with its own reset and saltation matrix.  If the
    reference is past an event the new rollout has not reached, the reference
    is backed up to its pre-impact state and integrated forward with the
    pre-event dynamics.
    """
    x_new = np.asarray(state.x, dtype=float)
    x_ref = prev.X[i]
    if prev_phase is None:
        prev_phase = prev.phase()
    c_ref = int(prev_phase[i])
    c_new = sum(1 for ev in new_events if ev.step_index < i)
    if c_new == c_ref:
        return x_new - x_ref
    if c_new > c_ref:
        if c_ref < len(prev.events):
            ev = prev.events[c_ref]
            return x_new - ev.x_plus + ev.salt @ (ev.x_minus - x_ref)
        # Reference never reaches this event: compare in the pre-event mode instead.
        ev = new_events[c_ref]
        ext_new = flow(sys, ev.source, ev.t_event, ev.x_minus, u, state.t - ev.t_event, dt)
        return ext_new - x_ref
    if c_new >= len(prev.events):
        raise NoEventFound(f"no reference event brackets sample {i}")
    ev = prev.events[c_new]
    ext_ref = flow(sys, ev.source, ev.t_event, ev.x_minus, u, state.t - ev.t_event, dt)
    return x_new - ext_ref


def forward_pass(
    prob: EstimationProblem,
    prev: SolverIterate,
    gains: GainSchedule,
    alpha: float,
    cfg: SolverConfig = SolverConfig(),
) -> SolverIterate:
    N, n = prob.N, prob.sys.n
    X = np.empty((N + 1, n))
    W = np.empty((N, n))
    modes = np.empty(N + 1, dtype=int)
    x = prev.X[0] + alpha * gains.dx0
    mode = prob.mode0
    X[0] = x
    modes[0] = mode
    prev_phase = prev.phase()
    events: list[EventRecord] = []
    bound = cfg.divergence_bound
    for i in range(N):
        s = HybridState(mode, x, prob.time(i))
        u = prob.u(i)
        dx = reference_extension(prob.sys, prev, s, i, events, prob.dt, u, prev_phase)
        w = prev.W[i] - alpha * gains.k[i] - gains.K[i] @ dx
        s, ev = step(prob.sys, s, u, w, prob.dt, index=i)
        x, mode = s.x, s.mode
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise RolloutDiverged(f"state left the bound {bound:g} at step {i}")
        X[i + 1] = x
        W[i] = w
        modes[i + 1] = mode
        if ev is not None:
            events.append(ev)
    return SolverIterate(X, W, modes, tuple(events), total_cost(prob, X, W))


# ---------------------------------------------------------------------------
# driver


def solve(prob: EstimationProblem, init: Optional[SolverIterate] = None, cfg: SolverConfig = SolverConfig()):
    """Alternate backward and forward passes until the cost stops decreasing.

    Returns ``(iterate, stats)``.  Every accepted step strictly decreases the
    cost, so the returned cost never exceeds the initial one.
    """
    it = init if init is not None else initial_iterate(prob)
    stats = SolveStats(costs=[it.J])
    for outer in range(cfg.max_outer_iters):
        _, gains = backward_pass(prob, it, cfg)
        stats.backward_passes += 1
        tol = cfg.cost_decrease_tol * max(1.0, abs(it.J))
        if gains.expected_decrease < tol:
            stats.converged = True
            stats.reason = "expected decrease below tolerance"
            break
        alpha = 1.0
        accepted = None
        for _ in range(cfg.max_line_search_iters + 1):
            stats.forward_passes += 1
            try:
                cand = forward_pass(prob, it, gains, alpha, cfg)
            except (HybridError, RolloutDiverged) as exc:
                log.debug("rollout rejected at alpha=%g: %s", alpha, exc)
                stats.rejected_rollouts += 1
                cand = None
            if cand is not None and cand.J < it.J:
                accepted = cand
                break
            alpha *= 0.5
        if accepted is None:
            stats.reason = "line search found no decrease"
            break
        decrease = it.J - accepted.J
        it = accepted
        stats.iterations += 1
        stats.costs.append(it.J)
        stats.log.append(IterationRecord(outer, it.J, gains.expected_decrease, alpha, len(it.events)))
        if decrease < tol:
            stats.converged = True
            stats.reason = "cost decrease below tolerance"
            break
    else:
        stats.reason = "max outer iterations"
    return it, stats


def write_solver_log(stats: SolveStats, path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "J", "dJ_expected", "alpha", "n_events"])
        for r in stats.log:
            wr.writerow([r.iteration, repr(r.J), repr(r.dJ_expected), repr(r.alpha), r.n_events])
