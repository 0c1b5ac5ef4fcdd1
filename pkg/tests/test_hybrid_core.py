import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridglue._numerics import next_breakpoint, rk4_span, rk4_step
from hybridglue.errors import (
    EmptySampleSet,
    EscapedFlowSet,
    MaxJumpsExceeded,
    NonTransversalEvent,
    NotApplicable,
    OutOfHorizon,
)
from hybridglue.hybrid_core import (
    HybridSystem,
    HybridTimeTrajectory,
    SimParams,
    all_passed,
    check_standing_assumptions,
    check_transversality,
    simulate_hybrid,
    verify_flow_tangency,
)

SQRT13 = np.sqrt(13.0)


def _first_impact(x1, x2, rho=1.0):
    return (x2 + np.sqrt(x2 * x2 + 2 * rho * x1)) / rho


# --- simulation -------------------------------------------------------------------

def test_ball_first_jump_closed_form(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(2.0))
    assert ex.jump_times.size == 1
    assert ex.jump_times[0] == pytest.approx(SQRT13 - 3.0, abs=1e-9)
    pre, post = ex.jump_pairs[0]
    np.testing.assert_allclose(pre, [0.0, -SQRT13], atol=1e-8)
    np.testing.assert_allclose(post, [0.0, SQRT13], atol=1e-8)
    assert pre[0] < 0 <= post[0]  # pre-jump point sits on the D side of the guard


def test_ball_jump_times_are_periodic(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(16.0))
    np.testing.assert_allclose(ex.jump_times, SQRT13 - 3.0 + 2 * SQRT13 * np.arange(3), atol=1e-8)
    assert ex.time_traj.N == 3
    assert ex.time_traj.length == pytest.approx(16.0)


def test_state_at_is_right_continuous(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(2.0))
    tau = ex.jump_times[0]
    np.testing.assert_allclose(ex.state_at(tau), [0.0, SQRT13], atol=1e-8)
    np.testing.assert_allclose(ex.state_at(tau - 1e-4, dense=True), [1e-4 * SQRT13, -SQRT13 + 1e-4], atol=1e-7)


def test_dense_state_matches_parabola(ball):
    ex = simulate_hybrid(ball.sys, [2.0, 1.0], SimParams(1.0))
    for t in (0.0, 0.1234, 0.5, 0.99999):
        np.testing.assert_allclose(ex.state_at(t, dense=True), [2 + t - t * t / 2, 1 - t], atol=1e-12)


def test_out_of_horizon(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(1.0))
    with pytest.raises(OutOfHorizon):
        ex.state_at(1.5)
    with pytest.raises(OutOfHorizon):
        ex.state_at(-0.1)


def test_iter_rows_labels_jumps(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(1.0, 0.01))
    events = [(i, e) for _, i, e, _ in ex.iter_rows() if e != "flow"]
    assert events == [(0, "pre"), (1, "post")]


def test_initial_state_in_jump_set_jumps_at_zero(ball):
    ex = simulate_hybrid(ball.sys, [0.0, -2.0], SimParams(0.5))
    assert ex.jump_times.tolist() == [0.0]
    np.testing.assert_allclose(ex.state_at(0.0), [0.0, 2.0])


def test_ripple_jump_state():
    from hybridglue.models import ripple_model

    r = ripple_model(validate=False)
    ex = simulate_hybrid(r.sys, [2.0, 0.0], SimParams(1.2))
    assert ex.jump_times[0] == pytest.approx(np.pi / 3, abs=1e-9)
    np.testing.assert_allclose(ex.jump_pairs[0][1], [1.0, np.sqrt(3.0)], atol=1e-8)


def test_max_jumps_exceeded(ball):
    with pytest.raises(MaxJumpsExceeded):
        simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(16.0, max_jumps=2))


def _line_system(in_D=lambda x: True, speed=-1e-9):
    return HybridSystem(
        n=2, flow_map=lambda x, u: np.array([speed, 0.0]), jump_map=lambda x: np.array([1.0, x[1]]),
        r_D=lambda x: -x[0], r_G=lambda x: x[0] - 1.0, in_flow_set=lambda x: bool(x[0] >= -1e-8),
        in_jump_set=lambda x: bool(in_D(x)), in_jump_image=lambda x: bool(abs(x[0] - 1.0) < 1e-8),
        grad_r_D=lambda x: np.array([-1.0, 0.0]),
    )


def test_non_transversal_event():
    with pytest.raises(NonTransversalEvent):
        simulate_hybrid(_line_system(in_D=lambda x: abs(x[0]) <= 1e-15), [1e-12, 0.0], SimParams(0.01))


def test_escaped_flow_set_when_guard_crossed_outside_D():
    sys = _line_system(in_D=lambda x: x[1] > 0, speed=-1.0)
    with pytest.raises(EscapedFlowSet):
        simulate_hybrid(sys, [0.5, -1.0], SimParams(1.0))


def test_sim_params_validation():
    with pytest.raises(ValueError):
        SimParams(1.0, step=0.0)
    with pytest.raises(ValueError):
        SimParams(1.0, step=1e-3, event_tol=1e-3)
    with pytest.raises(ValueError):
        SimParams(1.0, max_jumps=0)
    with pytest.raises(ValueError):
        SimParams(-1.0)


def test_time_trajectory_must_be_contiguous():
    with pytest.raises(ValueError):
        HybridTimeTrajectory(((0.0, 1.0), (1.5, 2.0)))
    with pytest.raises(ValueError):
        HybridTimeTrajectory(((1.0, 0.0),))


@settings(max_examples=25, deadline=None)
@given(x1=st.floats(0.1, 5.0), x2=st.floats(-5.0, 5.0))
def test_first_impact_and_energy(ball, x1, x2):
    t1 = _first_impact(x1, x2)
    ex = simulate_hybrid(ball.sys, [x1, x2], SimParams(t1 + 0.5, 1e-2))
    assert ex.jump_times[0] == pytest.approx(t1, abs=1e-8)
    energy = x1 + 0.5 * x2 * x2
    for arc in ex.arcs:
        np.testing.assert_allclose(arc.x[:, 0] + 0.5 * arc.x[:, 1] ** 2, energy, rtol=1e-10, atol=1e-8)


# --- breakpoints ------------------------------------------------------------------

def test_breakpoint_switch_is_seen_from_the_left():
    # x' = u(t) with u switching from 0 to 1 at t = 0.5; an exact integrator gives x(1) = 0.5
    sys = HybridSystem(
        n=1, flow_map=lambda x, u: np.array([u[0]]), jump_map=lambda x: x, r_D=lambda x: -1.0,
        r_G=lambda x: -1.0, in_flow_set=lambda x: True, in_jump_set=lambda x: False,
        in_jump_image=lambda x: False, p=1,
    )
    u = lambda t, x: np.array([1.0 if t >= 0.5 else 0.0])  # noqa: E731
    with_bp = simulate_hybrid(sys, [0.0], SimParams(1.0, 0.3), input=u, breakpoints=[0.5])
    assert with_bp.state_at(1.0)[0] == pytest.approx(0.5, abs=1e-14)
    assert 0.5 in with_bp.arcs[0].t
    without = simulate_hybrid(sys, [0.0], SimParams(1.0, 0.3), input=u)
    assert abs(without.state_at(1.0)[0] - 0.5) > 1e-3


def test_next_breakpoint():
    bps = np.array([1.0, 2.0, 3.0])
    assert next_breakpoint(bps, 0.5) == 1.0
    assert next_breakpoint(bps, 1.0) == 2.0
    assert next_breakpoint(bps, 3.0) == np.inf


def test_rk4_exact_on_cubic():
    x = rk4_step(lambda t, x: np.array([3 * t * t]), 0.0, np.array([0.0]), 1.0)
    assert x[0] == pytest.approx(1.0, abs=1e-15)


def test_rk4_span_splits_at_kink():
    field_ = lambda t, x: np.array([abs(t - 0.3)])  # noqa: E731
    exact = 0.5 * 0.3 ** 2 + 0.5 * 0.7 ** 2
    assert rk4_span(field_, 0.0, 1.0, np.array([0.0]), np.array([0.3]))[0] == pytest.approx(exact, abs=1e-15)
    assert abs(rk4_span(field_, 0.0, 1.0, np.array([0.0]))[0] - exact) > 1e-3


# --- structural checks ------------------------------------------------------------

def test_standing_assumptions_pass_on_bundles(ball, ripple, reflected, rng):
    for b in (ball, ripple, reflected):
        u = b.sampler.inputs(rng, 5) if b.sampler.inputs is not None else None
        rep = check_standing_assumptions(b.sys, b.sampler.flow(rng, 200), b.sampler.jump(rng, 200), u)
        assert all_passed(rep), {k: v for k, v in rep.items() if not v.passed}
    assert {"A1_level", "A1_rank", "A2_tangency"} <= set(
        check_standing_assumptions(reflected.sys, reflected.sampler.flow(rng, 20), reflected.sampler.jump(rng, 20)))


def test_transversality_margin_on_ball(ball):
    d = np.array([[0.0, -v] for v in (0.5, 1.0, 3.0)])
    res = check_transversality(ball.sys, "D", d)
    assert res.passed and res.worst_residual == pytest.approx(0.5)
    with pytest.raises(ValueError):
        check_transversality(ball.sys, "D", [[0.1, -1.0]])
    with pytest.raises(EmptySampleSet):
        check_transversality(ball.sys, "D", np.empty((0, 2)))


def test_flow_tangency(reflected, ball):
    pts = np.array([[1.0, 2.0, 1.0], [0.5, -1.0, -1.0]])
    assert verify_flow_tangency(reflected.sys, pts, [[3.0]]).passed
    with pytest.raises(NotApplicable):
        verify_flow_tangency(ball.sys, [[1.0, 1.0]])


def test_jump_image_overlapping_D_is_flagged(ball):
    bad = HybridSystem(**{**ball.sys.__dict__, "jump_map": lambda x: x})
    rep = check_standing_assumptions(bad, [[1.0, 1.0]], [[0.0, -1.0]])
    assert not rep["A4_D_disjoint_G"].passed
