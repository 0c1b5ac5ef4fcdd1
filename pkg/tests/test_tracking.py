import numpy as np
import pytest

from hybridglue.errors import MatchingViolation, NotHurwitz, NotInputAffine, SingularGamma
from hybridglue.hybrid_core import SimParams
from hybridglue.models import PiecewiseConstantInput, reflected_double_integrator
from hybridglue.tracking import (
    MatchingFeedback,
    build_matched_glued_control_system,
    check_reference,
    check_relaxed_matching,
    glued_error_continuity,
    identity_feedback,
    largest_converging_radius,
    input_breakpoints,
    linear_tracking_law,
    make_reference,
    simulate_closed_loop,
    tracking_controller,
    tracking_error_report,
)


@pytest.fixture(scope="module")
def reference(reflected):
    tr = reflected.tracking
    return make_reference(reflected.sys, [0.0, 6.0, 1.0], tr["u_r"], SimParams(21.0), tr["R_set"])


@pytest.fixture(scope="module")
def short_run(reflected, reference):
    u_c = tracking_controller(reflected.feedback, reflected.gm, reflected.tracking["law"])
    return simulate_closed_loop(reflected.sys, u_c, reference, [3.0, 8.0, 1.0], SimParams(5.0), reflected.gm)


def test_reference_jumps_on_the_switch_grid(reference):
    # u_r = -3 on [0, 4) from r(0) = (0, 6): the wall is reached exactly at t = 4, then every 6 and 4 s
    np.testing.assert_allclose(reference.r_jump_times[:3], [4.0, 10.0, 14.0], atol=1e-8)
    pre, post = reference.execution.jump_pairs[0]
    np.testing.assert_allclose(pre[:2], [0.0, -6.0], atol=1e-7)
    np.testing.assert_allclose(post, [0.0, 6.0, -1.0], atol=1e-7)


def test_reference_breakpoints_and_checks(reflected, reference):
    bps = reference.breakpoints(20.0)
    assert {4.0, 10.0, 14.0, 20.0} <= set(np.round(bps, 6))
    rep = check_reference(reflected.sys, reference, SimParams(21.0), n_check=100)
    assert all(r.passed for r in rep.values())
    assert set(rep) == {"C1_resimulation", "C1_in_flow_set", "C2_contained"}


def test_piecewise_input():
    u = PiecewiseConstantInput((-3.0, -2.0), (0.0, 4.0), 10.0)
    assert [u(t)[0] for t in (0.0, 3.999, 4.0, 9.99, 10.0, 14.5)] == [-3.0, -3.0, -2.0, -2.0, -3.0, -2.0]
    np.testing.assert_allclose(u.breakpoints(20.0), [4.0, 10.0, 14.0, 20.0])
    assert input_breakpoints(lambda t: 0.0, 5.0).size == 0


def test_closed_loop_eigenvalues(reflected):
    np.testing.assert_allclose(reflected.tracking["eigenvalues"], [-0.8, -0.75])
    with pytest.raises(NotHurwitz):
        reflected_double_integrator(K=(0.6, 1.55), validate=False)
    with pytest.raises(NotHurwitz):
        linear_tracking_law([[0.0, 0.0]], A=reflected.tracking["A"], B=reflected.tracking["B"])


def test_relaxed_matching_needs_gamma(reflected, rng):
    d = reflected.sampler.jump(rng, 50)
    rep = check_relaxed_matching(reflected.sys, reflected.gm, reflected.feedback, d)
    assert rep["b_condition"].passed and rep["a_condition"].passed
    plain = check_relaxed_matching(reflected.sys, reflected.gm, identity_feedback(1), d)
    assert not plain["b_condition"].passed
    with pytest.raises(MatchingViolation):
        build_matched_glued_control_system(reflected.sys, reflected.gm, identity_feedback(1), d)
    mgs = build_matched_glued_control_system(reflected.sys, reflected.gm, reflected.feedback, d)
    assert mgs.seam_residual <= 1e-12


def test_matched_glued_system_is_linear(reflected, rng):
    d = reflected.sampler.jump(rng, 20)
    mgs = build_matched_glued_control_system(reflected.sys, reflected.gm, reflected.feedback, d)
    A, B = reflected.tracking["A"], reflected.tracking["B"]
    for z in rng.normal(size=(10, 2)) * 3:
        v = rng.normal(size=1)
        np.testing.assert_allclose(mgs.f(z, v), A @ z + B @ v, atol=1e-12)


def test_not_input_affine(ball, rng):
    with pytest.raises(NotInputAffine):
        check_relaxed_matching(ball.sys, ball.gm, identity_feedback(1), ball.sampler.jump(rng, 3))


def test_controller_formula(reflected, rng):
    u_c = tracking_controller(reflected.feedback, reflected.gm, reflected.tracking["law"])
    K = reflected.tracking["K"]
    for _ in range(10):
        x = np.array([*rng.uniform(0, 5, 2), rng.choice([-1.0, 1.0])])
        r = np.array([*rng.uniform(0, 5, 2), rng.choice([-1.0, 1.0])])
        u_r = rng.normal(size=1)
        expected = x[2] * (K @ (x[2] * x[:2] - r[2] * r[:2]) + r[2] * u_r)
        np.testing.assert_allclose(u_c(u_r, r, x), expected, atol=1e-12)


def test_singular_gamma(reflected):
    singular = MatchingFeedback(lambda x: np.array([[0.0]]), lambda x: np.zeros(1))
    u_c = tracking_controller(singular, reflected.gm, reflected.tracking["law"])
    with pytest.raises(SingularGamma):
        u_c(np.array([1.0]), np.array([1.0, 1.0, 1.0]), np.array([1.0, 1.0, 1.0]))
    mat = MatchingFeedback(lambda x: np.zeros((2, 2)), lambda x: np.zeros(2))
    with pytest.raises(SingularGamma):
        tracking_controller(mat, reflected.gm, reflected.tracking["law"])(np.zeros(2), np.ones(3), np.ones(3))


def test_short_closed_loop(short_run, reflected):
    run = short_run
    assert run.glued_err[0] == pytest.approx(np.hypot(3.0, 2.0))
    assert run.glued_err[-1] < run.glued_err[0] / 3
    assert run.execution.jump_times.size >= 1
    # asynchronous jumps: the plant and the reference hit the wall at different times
    assert abs(run.execution.jump_times[0] - 4.0) > 0.05
    cols = run.header()
    assert cols[0] == "t" and cols[-1] == "glued_err" and "u_r" in cols
    row = next(run.iter_rows())
    assert len(row) == len(cols)


def test_glued_error_continuity(short_run):
    assert glued_error_continuity(short_run, 100.0).passed
    # the plant-coordinate error jumps at the reflections, the glued one does not
    plant_err = np.linalg.norm(short_run.x[:, :2] - short_run.r[:, :2], axis=1)
    assert np.max(np.abs(np.diff(plant_err))) > 1.0
    assert np.max(np.abs(np.diff(short_run.glued_err))) < 0.05
    assert not glued_error_continuity(short_run, 1e-3).passed


def test_tracking_error_report_shape(short_run):
    rep = tracking_error_report(short_run, 0.2, 0.1)
    assert rep.epsilon == 0.1 and rep.alpha == 0.2


def test_largest_converging_radius_is_linear_in_tol(reflected, reference):
    # the glued error obeys a linear ODE, so the error at T scales with the initial offset
    from scipy.linalg import expm

    u_c = tracking_controller(reflected.feedback, reflected.gm, reflected.tracking["law"])
    tr = reflected.tracking
    d = np.array([1.0, 1.0]) / np.sqrt(2.0)
    gain = np.linalg.norm(expm((tr["A"] + tr["B"] @ tr["K"]) * 2.0) @ d)
    r = largest_converging_radius(reflected.sys, u_c, reference, reflected.gm, SimParams(2.0), d,
                                  r_max=4.0, iters=6, tol=2.0 * gain)
    assert r == pytest.approx(2.0, abs=4.0 / 2 ** 6 + 1e-6)
