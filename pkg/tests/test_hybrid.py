import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hilqe.errors import (
    EventInsideStep,
    MultipleSimultaneousCrossings,
    SecondEventInStep,
    StepError,
    TangentialCrossing,
)
from hilqe.hybrid import (
    HybridState,
    HybridSystem,
    HybridTrajectory,
    Transition,
    flow_jacobian,
    locate_event,
    phase_index,
    saltation,
    simulate,
    step,
)
from hilqe.models import BallParams, analytic_ball_flow, ball_impact_time, make_aslip, make_ball

BALL, _ = make_ball()
IMPACT = BALL.transitions[0]
X0 = np.array([0.0, 1.0, 0.5, -5.0])
# Positive root of 4.9 t^2 + 5 t - 1 = 0.
T_IMPACT = (-5.0 + math.sqrt(25.0 + 4 * 4.9)) / (2 * 4.9)


def test_closed_form_impact_root():
    assert T_IMPACT == pytest.approx(0.17125746, abs=1e-8)
    assert ball_impact_time(X0) == pytest.approx(T_IMPACT, abs=1e-14)


def test_step_without_event_matches_ballistic_closed_form():
    s, ev = step(BALL, HybridState(0, X0, 0.0), None, None, 0.01)
    assert ev is None
    np.testing.assert_allclose(s.x, [0.005, 0.94951, 0.5, -5.098], atol=1e-10, rtol=0)
    np.testing.assert_allclose(s.x, analytic_ball_flow(X0, 0.01), atol=1e-12, rtol=0)


def test_locate_event_finds_closed_form_root():
    t_star, x_star, tr = locate_event(BALL, 0, 0.0, X0, None, 0.2)
    assert tr is IMPACT
    assert t_star == pytest.approx(T_IMPACT, abs=1e-12)
    assert abs(x_star[1]) <= BALL.tol_g


def test_locate_event_none_when_no_crossing():
    assert locate_event(BALL, 0, 0.0, X0, None, 0.01) is None


def test_step_through_impact_piecewise_closed_form():
    s, ev = step(BALL, HybridState(0, X0, 0.0), None, None, 0.2, index=3)
    assert ev is not None and ev.step_index == 3
    vy_minus = -5.0 - 9.8 * T_IMPACT
    assert ev.x_minus[3] == pytest.approx(vy_minus, abs=1e-9)
    assert ev.x_plus[3] == pytest.approx(0.8 * abs(vy_minus), abs=1e-9)
    expected = analytic_ball_flow(ev.x_plus, 0.2 - T_IMPACT)
    np.testing.assert_allclose(s.x, expected, atol=1e-9)
    assert s.t == pytest.approx(0.2)


def test_noise_added_once_at_end_of_step():
    w = np.array([0.1, -0.2, 0.3, 0.4])
    a, _ = step(BALL, HybridState(0, X0, 0.0), None, None, 0.2)
    b, _ = step(BALL, HybridState(0, X0, 0.0), None, w, 0.2)
    np.testing.assert_allclose(b.x - a.x, w, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(
    y=st.floats(0.5, 3.0),
    vx=st.floats(-2.0, 2.0),
    vy=st.floats(-1.0, 3.0),
    h=st.floats(0.001, 0.02),
)
def test_step_composition_without_events(y, vx, vy, h):
    x = np.array([0.0, y, vx, vy])
    one, e1 = step(BALL, HybridState(0, x, 0.0), None, None, h)
    two, e2 = step(BALL, one, None, None, h)
    big, e3 = step(BALL, HybridState(0, x, 0.0), None, None, 2 * h)
    assume(e1 is None and e2 is None and e3 is None)
    np.testing.assert_allclose(two.x, big.x, atol=1e-12)


def test_ball_saltation_entries():
    S = saltation(BALL, IMPACT, 0.0, np.array([0.0, 0.0, 0.5, -5.0]))
    assert abs(S[3, 3] - (-0.8)) <= 1e-9
    assert abs(S[3, 1] - 3.528) <= 1e-9
    assert abs(S[1, 1] - (-0.8)) <= 1e-9
    expected = np.diag([1.0, -0.8, 1.0, -0.8])
    expected[3, 1] = 3.528
    np.testing.assert_allclose(S, expected, atol=1e-12)


def test_tangential_crossing_raises():
    with pytest.raises(TangentialCrossing):
        saltation(BALL, IMPACT, 0.0, np.array([0.0, 0.0, 0.5, 0.0]))


def _through_event_order(sys, mode, x0, dt, direction, scales=(1e-4, 1e-5, 1e-6)):
    """Empirical order of the first-order through-event prediction error."""
    base, ev = step(sys, HybridState(mode, x0, 0.0), None, None, dt)
    assert ev is not None
    tau = ev.t_event
    A1, _ = flow_jacobian(sys, ev.source, 0.0, x0, None, tau, check_events=False)
    A2, _ = flow_jacobian(sys, ev.target, tau, ev.x_plus, None, dt - tau, check_events=False)
    M = A2 @ ev.salt @ A1
    errs = []
    for eps in scales:
        pert, ev_p = step(sys, HybridState(mode, x0 + eps * direction, 0.0), None, None, dt)
        assert ev_p is not None
        errs.append(np.linalg.norm(pert.x - base.x - eps * M @ direction))
    return errs, math.log10(errs[0] / errs[-1]) / math.log10(scales[0] / scales[-1])


@settings(max_examples=30, deadline=None)
@given(
    y=st.floats(0.05, 1.0),
    vx=st.floats(-1.0, 1.0),
    vy=st.floats(-6.0, -1.0),
    d=st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4),
)
def test_ball_saltation_first_order_convergence(y, vx, vy, d):
    d = np.array(d)
    # Only perturbations that move the impact time make the map nonlinear.
    assume(abs(d[1]) + abs(d[3]) > 0.2)
    x0 = np.array([0.0, y, vx, vy])
    dt = ball_impact_time(x0) + 0.05
    errs, order = _through_event_order(BALL, 0, x0, dt, d / np.linalg.norm(d))
    assume(errs[0] > 1e-11)
    assert order >= 1.9


def test_aslip_touchdown_saltation_first_order_convergence():
    sys, _ = make_aslip()
    rng = np.random.default_rng(4)
    # Flight state 4 mm above touchdown, leg at rest length straight below the hip.
    th = 0.02
    x0 = np.array([0.01, 0.004 + 1.0 + 0.5 * np.cos(th), th, 0.0, 0.004, 0.3, -4.4, 0.1])
    x0[3] = x0[0] + 0.5 * np.sin(th)
    for _ in range(5):
        d = rng.normal(size=8)
        _, order = _through_event_order(sys, 0, x0, 0.002, d / np.linalg.norm(d))
        assert order >= 1.9


def test_second_event_in_step_raises():
    x = np.array([0.0, 1e-3, 0.0, -0.1])
    with pytest.raises(SecondEventInStep):
        step(BALL, HybridState(0, x, 0.0), None, None, 1.0)


def test_entering_guard_fires_at_step_start():
    x = np.array([0.0, 0.0, 0.3, -2.0])
    s, ev = step(BALL, HybridState(0, x, 1.0), None, None, 0.01)
    assert ev is not None and ev.t_event == 1.0
    np.testing.assert_array_equal(ev.x_minus, x)
    assert ev.x_plus[3] == pytest.approx(1.6)


def test_state_just_reset_onto_guard_does_not_refire():
    x = np.array([0.0, 0.0, 0.3, 1.6])
    s, ev = step(BALL, HybridState(0, x, 0.0), None, None, 0.01)
    assert ev is None and s.x[1] > 0


def test_multiple_simultaneous_crossings():
    f = lambda t, x, u: np.array([-1.0])
    tr_a = Transition(0, 1, lambda t, x: float(x[0]), lambda t, x: (0.0, np.array([1.0])),
                      lambda t, x: np.array(x), lambda t, x: (np.zeros(1), np.eye(1)), "a")
    tr_b = dataclasses.replace(tr_a, target=2, name="b")
    sys = HybridSystem(1, (0, 1, 2), {0: f, 1: f, 2: f}, (tr_a, tr_b))
    with pytest.raises(MultipleSimultaneousCrossings):
        locate_event(sys, 0, 0.0, np.array([0.5]), None, 1.0)


def test_flow_jacobian_ball_is_exact():
    dt = 0.01
    A, B = flow_jacobian(BALL, 0, 0.0, X0, None, dt)
    expected = np.eye(4)
    expected[0, 2] = expected[1, 3] = dt
    np.testing.assert_allclose(A, expected, atol=1e-15)
    np.testing.assert_array_equal(B, np.eye(4))


def test_flow_jacobian_zero_duration():
    A, B = flow_jacobian(BALL, 0, 0.0, X0, None, 0.0)
    np.testing.assert_array_equal(A, np.eye(4))
    np.testing.assert_array_equal(B, np.eye(4))


def test_flow_jacobian_rejects_event_steps():
    with pytest.raises(EventInsideStep):
        flow_jacobian(BALL, 0, 0.0, X0, None, 0.2)


def test_finite_difference_jacobian_matches_variational():
    sys, _ = make_aslip()
    fd_sys = dataclasses.replace(sys, field_jacobians={})
    x = np.array([0.05, 1.8, 0.1, 0.3, 0.0, 0.4, -1.0, 0.2])
    x[1] = 1.0 * np.cos(0.1) + 0.5 * np.cos(0.1) - 0.05  # compressed leg
    A_exact, _ = flow_jacobian(sys, 1, 0.0, x, None, 1e-3, check_events=False)
    A_fd, _ = flow_jacobian(fd_sys, 1, 0.0, x, None, 1e-3, check_events=False)
    np.testing.assert_allclose(A_fd, A_exact, atol=1e-7)


def test_simulate_zero_noise_single_impact():
    traj = simulate(BALL, HybridState(0, X0, 0.0), None, None, 0.01, 100)
    assert len(traj.events) == 1
    ev = traj.events[0]
    assert ev.step_index == 17  # impact inside [0.17, 0.18]; sample 18 is the first after it
    assert ev.t_event == pytest.approx(T_IMPACT, abs=1e-12)
    assert np.all(np.diff(traj.t) > 0)
    np.testing.assert_allclose(np.diff(traj.t), 0.01, atol=1e-12)
    np.testing.assert_array_equal(traj.phase_index()[:18], 0)
    np.testing.assert_array_equal(traj.phase_index()[18:], 1)


def test_simulate_wraps_step_errors_with_index():
    x = np.array([0.0, 1e-3, 0.0, -0.1])
    with pytest.raises(StepError) as info:
        simulate(BALL, HybridState(0, x, 0.0), None, None, 1.0, 3)
    assert info.value.index == 0
    assert isinstance(info.value.cause, SecondEventInStep)


def test_simulate_rejects_wrong_noise_length():
    with pytest.raises(ValueError):
        simulate(BALL, HybridState(0, X0, 0.0), None, np.zeros((3, 4)), 0.01, 4)


def test_phase_index_counts_events_before_each_sample():
    traj = simulate(BALL, HybridState(0, X0, 0.0), None, None, 0.01, 100)
    np.testing.assert_array_equal(phase_index(traj.events, 101), traj.phase_index())
    assert phase_index((), 5).tolist() == [0] * 5


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    W = rng.normal(scale=0.01, size=(100, 4))
    traj = simulate(BALL, HybridState(0, X0, 0.0), None, W, 0.01, 100)
    traj.to_csv(tmp_path / "traj.csv", tmp_path / "events.csv")
    back = HybridTrajectory.from_csv(tmp_path / "traj.csv", tmp_path / "events.csv")
    np.testing.assert_array_equal(back.t, traj.t)
    np.testing.assert_array_equal(back.x, traj.x)
    np.testing.assert_array_equal(back.modes, traj.modes)
    assert len(back.events) == len(traj.events)
    for a, b in zip(back.events, traj.events):
        assert (a.step_index, a.source, a.target, a.t_event) == (b.step_index, b.source, b.target, b.t_event)
        np.testing.assert_array_equal(a.x_minus, b.x_minus)
        np.testing.assert_array_equal(a.x_plus, b.x_plus)
        np.testing.assert_array_equal(a.salt, b.salt)


def test_restitution_parameter_reaches_reset():
    sys, _ = make_ball(BallParams(e=0.5))
    _, ev = step(sys, HybridState(0, X0, 0.0), None, None, 0.2)
    assert ev.x_plus[3] == pytest.approx(-0.5 * ev.x_minus[3])
