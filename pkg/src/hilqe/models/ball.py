"""Planar bouncing ball, state ``q = [x, y, xdot, ydot]``.

One flight mode with a self-transition at ground contact ``y = 0``; the reset
reverses and scales the vertical velocity by the restitution coefficient.
Only the position is measured, so the measurement is continuous through
impacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from ..hybrid import HybridSystem, Transition
from .base import MeasurementModel, selector

FLIGHT = 0


@dataclass(frozen=True)
class BallParams:
    e: float = 0.8  # restitution
    a_g: float = 9.8  # m/s^2

    def __post_init__(self):
        if not 0.0 < self.e < 1.0:
            raise ParameterError(f"restitution e must lie in (0, 1), got {self.e}")
        if not self.a_g > 0.0:
            raise ParameterError(f"gravity a_g must be positive, got {self.a_g}")


def make_ball(p: BallParams = BallParams()) -> tuple[HybridSystem, MeasurementModel]:
    g = p.a_g
    e = p.e
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    A.setflags(write=False)
    dRdx = np.diag([1.0, 1.0, 1.0, -e])
    dRdx.setflags(write=False)
    dgdx = np.array([0.0, 1.0, 0.0, 0.0])
    dgdx.setflags(write=False)
    zeros4 = np.zeros(4)

    def field(t, q, u):
        return np.array([q[2], q[3], 0.0, -g])

    def field_jac(t, q, u):
        return A

    impact = Transition(
        FLIGHT,
        FLIGHT,
        guard=lambda t, q: float(q[1]),
        guard_gradient=lambda t, q: (0.0, dgdx),
        reset=lambda t, q: np.array([q[0], q[1], q[2], -e * q[3]]),
        reset_jacobian=lambda t, q: (zeros4, dRdx),
        name="impact",
    )
    sys = HybridSystem(
        n=4,
        modes=(FLIGHT,),
        vector_fields={FLIGHT: field},
        transitions=(impact,),
        field_jacobians={FLIGHT: field_jac},
        name="ball",
    )
    return sys, selector(4, [0, 1], name="ball-position")


def analytic_ball_flow(q0, t: float, p: BallParams = BallParams()) -> np.ndarray:
    """Closed-form ballistic flight (no impact on ``[0, t]``)."""
    x, y, vx, vy = np.asarray(q0, dtype=float)
    return np.array([x + vx * t, y + vy * t - 0.5 * p.a_g * t * t, vx, vy - p.a_g * t])


def ball_impact_time(q0, p: BallParams = BallParams()) -> float:
    """Positive root of ``y(t) = 0`` for ballistic flight from ``q0``."""
    _, y, _, vy = np.asarray(q0, dtype=float)
    disc = vy * vy + 2.0 * p.a_g * y
    return float((vy + np.sqrt(disc)) / p.a_g)


def ball_energy(q, p: BallParams = BallParams()) -> float:
    """Specific mechanical energy (per unit mass)."""
    q = np.asarray(q, dtype=float)
    return float(0.5 * (q[2] ** 2 + q[3] ** 2) + p.a_g * q[1])
