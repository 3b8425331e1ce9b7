"""Asymmetric spring-loaded inverted pendulum (ASLIP) hopper.

State ``q = [x_b, y_b, theta_b, x_t, y_t, xd_b, yd_b, thetad_b]``: body
center of mass, body pitch, toe position and body velocities.  The leg is
massless and attaches at a hip point ``l_b`` below the center of mass along
the body axis.

* flight (mode 0): ballistic body; the toe is carried rigidly with the body,
  so leg length and hip angle stay at whatever they were at liftoff.
* stance (mode 1): toe pinned; body driven by gravity, a radial leg spring
  ``k_l`` about ``l_0`` and a hip torsion spring ``k_h`` about ``phi_0``.
  Equations of motion come from the Lagrangian, derived symbolically once per
  parameter set.

Touchdown fires on ``y_t``; liftoff fires on ``l_0 - l_leg`` (positive while
the leg is compressed).  Both resets are the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from ..errors import ParameterError
from ..hybrid import HybridSystem, Transition
from .base import MeasurementModel, selector

FLIGHT = 0
STANCE = 1
N_STATE = 8


@dataclass(frozen=True)
class AslipParams:
    m_b: float = 1.0  # kg
    a_g: float = 9.8  # m/s^2
    l_b: float = 0.5  # m, hip offset from the center of mass
    I_b: float = 1.0  # kg m^2
    k_h: float = 100.0  # N m / rad
    k_l: float = 100.0  # N / m
    l_0: float = 1.0  # m
    phi_0: float = 0.0  # rad

    def __post_init__(self):
        for name in ("m_b", "I_b", "k_h", "k_l", "l_0"):
            if not getattr(self, name) > 0.0:
                raise ParameterError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.a_g < 0.0 or self.l_b < 0.0:
            raise ParameterError("a_g and l_b must be non-negative")


def nominal_initial_state() -> np.ndarray:
    return np.array([0.0, 2.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


class _Stance:
    """Lambdified stance dynamics, leg geometry and energy for one parameter set."""

    def __init__(self, p: AslipParams):
        xb, yb, th, xt, yt, vx, vy, w = sp.symbols("x_b y_b theta_b x_t y_t xd_b yd_b thetad_b", real=True)
        state = [xb, yb, th, xt, yt, vx, vy, w]
        hip_x = xb + p.l_b * sp.sin(th)
        hip_y = yb - p.l_b * sp.cos(th)
        dx = xt - hip_x
        dy = yt - hip_y
        leg = sp.sqrt(dx**2 + dy**2)
        rel = sp.atan2(dx, -dy) - th
        phi = sp.atan2(sp.sin(rel), sp.cos(rel))
        V = p.m_b * p.a_g * yb + p.k_l * (leg - p.l_0) ** 2 / 2 + p.k_h * (phi - p.phi_0) ** 2 / 2
        T = p.m_b * (vx**2 + vy**2) / 2 + p.I_b * w**2 / 2
        # Diagonal constant mass matrix: Euler-Lagrange reduces to M qdd = -dV/dq.
        acc = [-sp.diff(V, xb) / p.m_b, -sp.diff(V, yb) / p.m_b, -sp.diff(V, th) / p.I_b]
        F = sp.Matrix([vx, vy, w, 0, 0, *acc])
        J = F.jacobian(sp.Matrix(state))
        leg_grad = sp.Matrix([leg]).jacobian(sp.Matrix(state))

        self.field = sp.lambdify([state], F, modules="numpy", cse=True)
        self.jac = sp.lambdify([state], J, modules="numpy", cse=True)
        self.leg = sp.lambdify([state], leg, modules="math")
        self.leg_grad = sp.lambdify([state], leg_grad, modules="numpy", cse=True)
        self.hip_angle = sp.lambdify([state], phi, modules="math")
        self.energy = sp.lambdify([state], T + V, modules="math")


@lru_cache(maxsize=8)
def _stance(p: AslipParams) -> _Stance:
    return _Stance(p)


def make_aslip(p: AslipParams = AslipParams()) -> tuple[HybridSystem, MeasurementModel]:
    st = _stance(p)
    g = p.a_g
    eye = np.eye(N_STATE)
    eye.setflags(write=False)
    zeros = np.zeros(N_STATE)
    zeros.setflags(write=False)
    e_yt = np.zeros(N_STATE)
    e_yt[4] = 1.0
    e_yt.setflags(write=False)

    def flight(t, q, u):
        xb, yb, th, xt, yt, vx, vy, w = q
        return np.array([vx, vy, w, vx - w * (yt - yb), vy + w * (xt - xb), 0.0, -g, 0.0])

    def flight_jac(t, q, u):
        xb, yb, th, xt, yt, vx, vy, w = q
        J = np.zeros((N_STATE, N_STATE))
        J[0, 5] = J[1, 6] = J[2, 7] = 1.0
        J[3, 1], J[3, 4], J[3, 5], J[3, 7] = w, -w, 1.0, -(yt - yb)
        J[4, 0], J[4, 3], J[4, 6], J[4, 7] = -w, w, 1.0, xt - xb
        return J

    def stance(t, q, u):
        return st.field(q).ravel()

    def stance_jac(t, q, u):
        return st.jac(q)

    touchdown = Transition(
        FLIGHT,
        STANCE,
        guard=lambda t, q: float(q[4]),
        guard_gradient=lambda t, q: (0.0, e_yt),
        reset=lambda t, q: np.array(q, dtype=float),
        reset_jacobian=lambda t, q: (zeros, eye),
        name="touchdown",
    )
    liftoff = Transition(
        STANCE,
        FLIGHT,
        guard=lambda t, q: p.l_0 - st.leg(q),
        guard_gradient=lambda t, q: (0.0, -st.leg_grad(q).ravel()),
        reset=lambda t, q: np.array(q, dtype=float),
        reset_jacobian=lambda t, q: (zeros, eye),
        name="liftoff",
    )
    sys = HybridSystem(
        n=N_STATE,
        modes=(FLIGHT, STANCE),
        vector_fields={FLIGHT: flight, STANCE: stance},
        transitions=(touchdown, liftoff),
        field_jacobians={FLIGHT: flight_jac, STANCE: stance_jac},
        name="aslip",
    )
    return sys, selector(N_STATE, [0, 1, 2, 3, 4], name="aslip-positions")


def leg_length(q, p: AslipParams = AslipParams()) -> float:
    return float(_stance(p).leg(np.asarray(q, dtype=float)))


def hip_angle(q, p: AslipParams = AslipParams()) -> float:
    return float(_stance(p).hip_angle(np.asarray(q, dtype=float)))


def stance_energy(q, p: AslipParams = AslipParams()) -> float:
    """Kinetic + gravitational + both spring potentials with the toe pinned."""
    return float(_stance(p).energy(np.asarray(q, dtype=float)))
