"""Event-driven hybrid dynamical systems.

A system is a set of modes, each with its own vector field, plus directed
transitions carrying a guard ``g(t, x)`` and a reset ``R(t, x)``.  A
transition fires when its guard goes from positive to non-positive along the
flow.  Integration is fixed-step RK4 with one substep per sample interval;
guard crossings inside a step are located by bisection on the partial RK4
step, the reset is applied, and the remainder of the step is integrated in
the new mode.  Additive process noise enters once, at the end of the step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    EventInsideStep,
    GuardToleranceError,
    HybridError,
    MultipleSimultaneousCrossings,
    SecondEventInStep,
    StepError,
    TangentialCrossing,
)

VectorField = Callable[[float, np.ndarray, Optional[np.ndarray]], np.ndarray]
FieldJacobian = Callable[[float, np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class Transition:
    """Directed edge ``source -> target`` with guard and reset evaluators.

    ``guard_gradient`` returns ``(dg/dt, dg/dx)`` and ``reset_jacobian``
    returns ``(dR/dt, dR/dx)``.
    """

    source: int
    target: int
    guard: Callable[[float, np.ndarray], float]
    guard_gradient: Callable[[float, np.ndarray], tuple[float, np.ndarray]]
    reset: Callable[[float, np.ndarray], np.ndarray]
    reset_jacobian: Callable[[float, np.ndarray], tuple[np.ndarray, np.ndarray]]
    name: str = ""


@dataclass(frozen=True)
class HybridSystem:
    n: int
    modes: tuple[int, ...]
    vector_fields: Mapping[int, VectorField]
    transitions: tuple[Transition, ...] = ()
    field_jacobians: Mapping[int, FieldJacobian] = field(default_factory=dict)
    tol_g: float = 1e-10  # guard units
    eps_trans: float = 1e-8  # guard-rate units
    max_bisections: int = 80
    name: str = "hybrid"

    def __post_init__(self):
        modes = set(self.modes)
        if set(self.vector_fields) != modes:
            raise ValueError("vector_fields must be keyed by exactly the system modes")
        for tr in self.transitions:
            if tr.source not in modes or tr.target not in modes:
                raise ValueError(f"transition {tr.name or (tr.source, tr.target)} references an unknown mode")
        outgoing = {m: tuple(tr for tr in self.transitions if tr.source == m) for m in self.modes}
        object.__setattr__(self, "_outgoing", outgoing)

    def outgoing(self, mode: int) -> tuple[Transition, ...]:
        return self._outgoing[mode]


@dataclass(frozen=True)
class HybridState:
    mode: int
    x: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class EventRecord:
    step_index: int
    source: int
    target: int
    t_event: float
    x_minus: np.ndarray
    x_plus: np.ndarray
    salt: np.ndarray


# ---------------------------------------------------------------------------
# integration primitives


def rk4(f: VectorField, t: float, x: np.ndarray, u, h: float) -> np.ndarray:
    k1 = f(t, x, u)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1, u)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2, u)
    k4 = f(t + h, x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_with_jacobian(f: VectorField, jac: FieldJacobian, t: float, x: np.ndarray, u, h: float):
    """One RK4 step together with the exact derivative of the discrete map."""
    eye = np.eye(x.shape[0])
    k1 = f(t, x, u)
    d1 = jac(t, x, u)
    x2 = x + 0.5 * h * k1
    k2 = f(t + 0.5 * h, x2, u)
    d2 = jac(t + 0.5 * h, x2, u) @ (eye + 0.5 * h * d1)
    x3 = x + 0.5 * h * k2
    k3 = f(t + 0.5 * h, x3, u)
    d3 = jac(t + 0.5 * h, x3, u) @ (eye + 0.5 * h * d2)
    x4 = x + h * k3
    k4 = f(t + h, x4, u)
    d4 = jac(t + h, x4, u) @ (eye + h * d3)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    return x_next, A


def flow(sys: HybridSystem, mode: int, t0: float, x0: np.ndarray, u, duration: float, max_step: float) -> np.ndarray:
    """Integrate ``mode``'s vector field for ``duration`` ignoring every guard."""
    f = sys.vector_fields[mode]
    x = np.asarray(x0, dtype=float)
    if duration <= 0.0:
        return x.copy()
    n_sub = max(1, int(np.ceil(duration / max_step - 1e-9)))
    h = duration / n_sub
    t = t0
    for _ in range(n_sub):
        x = rk4(f, t, x, u, h)
        t += h
    return x


def guard_rate(sys: HybridSystem, tr: Transition, t: float, x: np.ndarray, u=None) -> float:
    """Time derivative of the guard along the source-mode flow."""
    dgdt, dgdx = tr.guard_gradient(t, x)
    return float(dgdt + dgdx @ sys.vector_fields[tr.source](t, x, u))


# ---------------------------------------------------------------------------
# saltation and events


def saltation(sys: HybridSystem, tr: Transition, t: float, x_minus: np.ndarray, u=None) -> np.ndarray:
    """Saltation matrix of ``tr`` at the pre-impact state ``x_minus``.

    Maps first-order pre-event variations to post-event variations:
    ``DxR + (F+ - DxR F- - DtR) Dxg / (Dtg + Dxg F-)`` with ``F+`` evaluated
    at the reset point.
    """
    x_minus = np.asarray(x_minus, dtype=float)
    f_minus = sys.vector_fields[tr.source](t, x_minus, u)
    x_plus = tr.reset(t, x_minus)
    f_plus = sys.vector_fields[tr.target](t, x_plus, u)
    dRdt, dRdx = tr.reset_jacobian(t, x_minus)
    dgdt, dgdx = tr.guard_gradient(t, x_minus)
    denom = float(dgdt + dgdx @ f_minus)
    if abs(denom) <= sys.eps_trans:
        raise TangentialCrossing(
            f"guard rate {denom:.3e} at t={t:.6f} is below the transversality threshold {sys.eps_trans:g}"
        )
    return dRdx + np.outer(f_plus - dRdx @ f_minus - dRdt, dgdx) / denom


def _classify_guards(sys: HybridSystem, mode: int, t: float, x: np.ndarray, u):
    """Split outgoing transitions into armed (g > tol) and entering ones.

    A guard that is already non-positive is "entering" when the flow pushes
    further into the guard set; such a transition fires at the start of the
    step.  Non-positive guards with the flow leaving the guard set (e.g. the
    instant after a reset onto the guard) are treated as already transitioned.
    """
    armed, entering = [], []
    for tr in sys.outgoing(mode):
        g = tr.guard(t, x)
        if g > sys.tol_g:
            armed.append(tr)
        elif guard_rate(sys, tr, t, x, u) < -sys.eps_trans:
            entering.append((g, tr))
    entering.sort(key=lambda item: item[0])
    return armed, [tr for _, tr in entering]


def _bisect_crossing(sys: HybridSystem, tr: Transition, t0: float, x0: np.ndarray, u, dt: float):
    f = sys.vector_fields[tr.source]
    lo, hi = 0.0, dt
    x_hi = None
    g_hi = None
    for _ in range(sys.max_bisections):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        x_mid = rk4(f, t0, x0, u, mid)
        g_mid = tr.guard(t0 + mid, x_mid)
        if g_mid > 0.0:
            lo = mid
        else:
            hi, x_hi, g_hi = mid, x_mid, g_mid
            if g_mid == 0.0:
                break
    if x_hi is None:
        x_hi = rk4(f, t0, x0, u, hi)
        g_hi = tr.guard(t0 + hi, x_hi)
    if abs(g_hi) > sys.tol_g:
        raise GuardToleranceError(f"bisection left |g| = {abs(g_hi):.3e} > {sys.tol_g:g}")
    return hi, x_hi


def locate_event(
    sys: HybridSystem,
    mode: int,
    t0: float,
    x0: np.ndarray,
    u,
    dt: float,
    transitions: Optional[Sequence[Transition]] = None,
):
    """Earliest guard crossing on ``[t0, t0 + dt]`` or ``None``.

    Returns ``(t_star, x_star, transition)``.  Only guards that are strictly
    positive at ``t0`` can fire; by default these are all outgoing guards with
    ``g > tol_g``.  The crossing time is refined by bisection down to floating
    point resolution; ``|g(t_star, x_star)| <= tol_g`` is checked.
    """
    x0 = np.asarray(x0, dtype=float)
    if transitions is None:
        transitions = [tr for tr in sys.outgoing(mode) if tr.guard(t0, x0) > sys.tol_g]
    if not transitions:
        return None
    x_end = rk4(sys.vector_fields[mode], t0, x0, u, dt)
    fired = [tr for tr in transitions if tr.guard(t0 + dt, x_end) <= 0.0]
    if not fired:
        return None
    hits = sorted((_bisect_crossing(sys, tr, t0, x0, u, dt) + (tr,) for tr in fired), key=lambda h: h[0])
    if len(hits) > 1 and hits[1][0] - hits[0][0] <= sys.tol_g:
        raise MultipleSimultaneousCrossings(
            f"transitions {hits[0][2].name!r} and {hits[1][2].name!r} fire at t={t0 + hits[0][0]:.9f}"
        )
    tau, x_star, tr = hits[0]
    return t0 + tau, x_star, tr


def step(sys: HybridSystem, s: HybridState, u, w, dt: float, index: int = 0):
    """Advance one sample interval. Returns ``(next_state, event_or_None)``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    t0, mode = s.t, s.mode
    x0 = np.asarray(s.x, dtype=float)
    armed, entering = _classify_guards(sys, mode, t0, x0, u)

    hit = None
    if entering:
        hit = (t0, x0, entering[0])
    else:
        hit = locate_event(sys, mode, t0, x0, u, dt, armed)

    event = None
    if hit is None:
        x_end = rk4(sys.vector_fields[mode], t0, x0, u, dt)
        new_mode = mode
    else:
        t_ev, x_minus, tr = hit
        x_plus = np.asarray(tr.reset(t_ev, x_minus), dtype=float)
        salt = saltation(sys, tr, t_ev, x_minus, u)
        new_mode = tr.target
        remaining = (t0 + dt) - t_ev
        x_end = x_plus
        if remaining > 0.0:
            # A guard the reset lands on (within tol_g) counts too if the flow
            # leaves it upward: being non-positive again at the end of the step
            # means a second crossing.  Guards that start clearly negative are
            # left to the entry rule of later steps.
            armed_after = []
            for q in sys.outgoing(new_mode):
                g = q.guard(t_ev, x_plus)
                if g > sys.tol_g or (abs(g) <= sys.tol_g and guard_rate(sys, q, t_ev, x_plus, u) > sys.eps_trans):
                    armed_after.append(q)
            x_end = rk4(sys.vector_fields[new_mode], t_ev, x_plus, u, remaining)
            for q in armed_after:
                if q.guard(t0 + dt, x_end) <= 0.0:
                    raise SecondEventInStep(
                        f"{q.name or (q.source, q.target)} fires after {tr.name or (tr.source, tr.target)} "
                        f"within the step starting at t={t0:.6f}"
                    )
        event = EventRecord(index, mode, new_mode, float(t_ev), np.array(x_minus, dtype=float), x_plus, salt)

    x_next = x_end if w is None else x_end + w
    return HybridState(new_mode, x_next, t0 + dt), event


def flow_jacobian(sys: HybridSystem, mode: int, t0: float, x0: np.ndarray, u, dt: float, check_events: bool = True):
    """Jacobians ``(A, B_w)`` of one smooth step of ``mode``.

    ``A`` is the exact derivative of the RK4 map when the mode has an analytic
    field Jacobian, otherwise central finite differences of the map.  Noise is
    additive at the end of the step so ``B_w`` is the identity.
    """
    n = sys.n
    x0 = np.asarray(x0, dtype=float)
    eye = np.eye(n)
    if dt == 0.0:
        return eye, eye.copy()
    f = sys.vector_fields[mode]
    if check_events:
        armed, entering = _classify_guards(sys, mode, t0, x0, u)
        x_end = rk4(f, t0, x0, u, dt)
        if entering or any(tr.guard(t0 + dt, x_end) <= 0.0 for tr in armed):
            raise EventInsideStep(f"guard crossing inside the step starting at t={t0:.6f}")
    jac = sys.field_jacobians.get(mode)
    if jac is not None:
        _, A = rk4_with_jacobian(f, jac, t0, x0, u, dt)
        return A, eye
    A = np.empty((n, n))
    for j in range(n):
        h = 1e-6 * max(1.0, abs(x0[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        A[:, j] = (rk4(f, t0, xp, u, dt) - rk4(f, t0, xm, u, dt)) / (2.0 * h)
    return A, eye


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class HybridTrajectory:
    t: np.ndarray
    modes: np.ndarray
    x: np.ndarray
    events: tuple[EventRecord, ...]
    dt: float

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x.shape[0] - 1

    @property
    def samples(self) -> list[HybridState]:
        return [HybridState(int(m), x, float(t)) for t, m, x in zip(self.t, self.modes, self.x)]

    def phase_index(self) -> np.ndarray:
        """Number of events that happened before each sample."""
        return phase_index(self.events, self.x.shape[0])

    def to_csv(self, path, events_path=None) -> None:
        path = Path(path)
        n = self.x.shape[1]
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "mode"] + [f"x_{j}" for j in range(n)])
            for t, m, x in zip(self.t, self.modes, self.x):
                wr.writerow([repr(float(t)), int(m)] + [repr(float(v)) for v in x])
        if events_path is not None:
            write_events_csv(self.events, events_path, n)

    @classmethod
    def from_csv(cls, path, events_path=None, dt: Optional[float] = None) -> "HybridTrajectory":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        t = np.array([float(r[0]) for r in rows])
        modes = np.array([int(r[1]) for r in rows], dtype=int)
        x = np.array([[float(v) for v in r[2:]] for r in rows])
        events = read_events_csv(events_path, x.shape[1]) if events_path is not None else ()
        if dt is None:
            dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(t, modes, x, events, dt)


def phase_index(events: Sequence[EventRecord], n_samples: int) -> np.ndarray:
    counts = np.zeros(n_samples, dtype=int)
    for ev in events:
        if ev.step_index + 1 < n_samples:
            counts[ev.step_index + 1:] += 1
    return counts


def write_events_csv(events: Sequence[EventRecord], path, n: int) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        header = ["step_index", "from", "to", "t_event"]
        header += [f"x_minus_{j}" for j in range(n)] + [f"x_plus_{j}" for j in range(n)]
        header += [f"salt_{r}_{c}" for r in range(n) for c in range(n)]
        wr.writerow(header)
        for ev in events:
            row = [ev.step_index, ev.source, ev.target, repr(float(ev.t_event))]
            row += [repr(float(v)) for v in ev.x_minus]
            row += [repr(float(v)) for v in ev.x_plus]
            row += [repr(float(v)) for v in ev.salt.ravel()]
            wr.writerow(row)


def read_events_csv(path, n: int) -> tuple[EventRecord, ...]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    out = []
    for r in rows:
        vals = [float(v) for v in r[4:]]
        out.append(
            EventRecord(
                int(r[0]),
                int(r[1]),
                int(r[2]),
                float(r[3]),
                np.array(vals[:n]),
                np.array(vals[n:2 * n]),
                np.array(vals[2 * n:]).reshape(n, n),
            )
        )
    return tuple(out)


def simulate(sys: HybridSystem, x0: HybridState, controls, noise_seq, dt: float, N: int) -> HybridTrajectory:
    """Run ``N`` sequential steps from ``x0``.

    ``controls`` is ``None`` or an ``(N, m)`` array; ``noise_seq`` is ``None``
    (noise-free) or an ``(N, n)`` array added at the end of each step.
    """
    if noise_seq is not None and len(noise_seq) != N:
        raise ValueError(f"noise_seq has length {len(noise_seq)}, expected {N}")
    X = np.empty((N + 1, sys.n))
    modes = np.empty(N + 1, dtype=int)
    X[0] = x0.x
    modes[0] = x0.mode
    t0 = float(x0.t)
    events = []
    s = HybridState(x0.mode, np.asarray(x0.x, dtype=float), t0)
    for i in range(N):
        u = None if controls is None else controls[i]
        w = None if noise_seq is None else noise_seq[i]
        try:
            s, ev = step(sys, HybridState(s.mode, s.x, t0 + i * dt), u, w, dt, index=i)
        except HybridError as exc:
            raise StepError(i, exc) from exc
        X[i + 1] = s.x
        modes[i + 1] = s.mode
        if ev is not None:
            events.append(ev)
    t = t0 + dt * np.arange(N + 1)
    return HybridTrajectory(t, modes, X, tuple(events), dt)
