"""Salted Kalman filter: an EKF whose covariance crosses hybrid events through
the saltation matrix rather than the reset Jacobian."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SingularInnovationCovariance
from .hybrid import EventRecord, HybridState, HybridSystem, HybridTrajectory, flow_jacobian, step
from .models.base import MeasurementModel


@dataclass(frozen=True)
class GaussianBelief:
    mean: HybridState
    P: np.ndarray
    phase: int = 0  # events the mean has gone through so far
    event: Optional[EventRecord] = None  # event of the predict step that produced this belief


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def skf_predict(
    sys: HybridSystem,
    b: GaussianBelief,
    u,
    dt: float,
    W_cov: np.ndarray,
    index: int = 0,
    split_event: bool = True,
) -> GaussianBelief:
    """Propagate the mean through one noise-free hybrid step and push the
    covariance through the step's linearization.

    On an event step the covariance map is ``A2 Xi A1`` with ``A1``/``A2`` the
    flow Jacobians before and after the event; ``split_event=False`` uses the
    lumped ``Xi A`` over the whole step instead.
    """
    s = b.mean
    nxt, ev = step(sys, s, u, None, dt, index=index)
    if ev is None:
        A, _ = flow_jacobian(sys, s.mode, s.t, s.x, u, dt, check_events=False)
        M = A
    elif split_event:
        tau = ev.t_event - s.t
        A1, _ = flow_jacobian(sys, ev.source, s.t, s.x, u, tau, check_events=False)
        A2, _ = flow_jacobian(sys, ev.target, ev.t_event, ev.x_plus, u, (s.t + dt) - ev.t_event, check_events=False)
        M = A2 @ ev.salt @ A1
    else:
        A, _ = flow_jacobian(sys, s.mode, s.t, s.x, u, dt, check_events=False)
        M = ev.salt @ A
    P = _symmetrize(M @ b.P @ M.T + W_cov)
    return GaussianBelief(nxt, P, b.phase + (ev is not None), ev)


def skf_update(b: GaussianBelief, y: np.ndarray, meas: MeasurementModel, V_cov: np.ndarray) -> GaussianBelief:
    """EKF correction with a Joseph-form covariance update."""
    x = b.mean.x
    H = meas.H(x)
    S = H @ b.P @ H.T + V_cov
    try:
        L = np.linalg.cholesky(_symmetrize(S))
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance("innovation covariance is not positive definite") from None
    PHt = b.P @ H.T
    # K = P H^T S^-1 via two triangular solves.
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    x_new = x + K @ (np.asarray(y, dtype=float) - meas.h(x))
    IKH = np.eye(x.shape[0]) - K @ H
    P = _symmetrize(IKH @ b.P @ IKH.T + K @ V_cov @ K.T)
    return GaussianBelief(HybridState(b.mean.mode, x_new, b.mean.t), P, b.phase, b.event)


def run_skf(prob, V_cov: np.ndarray, W_cov: np.ndarray, P_0: np.ndarray, split_event: bool = True) -> list[GaussianBelief]:
    """Filter all ``N`` measurements of an ``EstimationProblem``.

    Takes covariances, not the inverse weights stored on the problem.  Returns
    ``N + 1`` beliefs; the first is the prior.
    """
    b = GaussianBelief(HybridState(prob.mode0, np.array(prob.x0_bar, dtype=float), prob.t0), np.array(P_0, dtype=float))
    out = [b]
    for i in range(prob.N):
        b = GaussianBelief(HybridState(b.mean.mode, b.mean.x, prob.time(i)), b.P, b.phase, b.event)
        b = skf_predict(prob.sys, b, prob.u(i), prob.dt, W_cov, index=i, split_event=split_event)
        b = skf_update(b, prob.Y[i], prob.meas, V_cov)
        out.append(b)
    return out


def beliefs_to_trajectory(beliefs: list[GaussianBelief], dt: float) -> HybridTrajectory:
    t = np.array([b.mean.t for b in beliefs])
    modes = np.array([b.mean.mode for b in beliefs], dtype=int)
    X = np.array([b.mean.x for b in beliefs])
    events = tuple(b.event for b in beliefs if b.event is not None)
    return HybridTrajectory(t, modes, X, events, dt)


def write_beliefs_csv(beliefs: list[GaussianBelief], path, include_cov: bool = True) -> None:
    n = beliefs[0].mean.x.shape[0]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        header = ["t", "mode"] + [f"mean_{j}" for j in range(n)]
        if include_cov:
            header += [f"P_{r}_{c}" for r in range(n) for c in range(n)]
        wr.writerow(header)
        for b in beliefs:
            row = [repr(float(b.mean.t)), b.mean.mode] + [repr(float(v)) for v in b.mean.x]
            if include_cov:
                row += [repr(float(v)) for v in b.P.ravel()]
            wr.writerow(row)
