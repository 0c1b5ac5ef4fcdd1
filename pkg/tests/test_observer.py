import numpy as np
import pytest
import sympy as sp

from hybridglue.errors import CovarianceDivergence, I1Violated, I2Violated, OrderNonPositive, SignalTooSparse
from hybridglue.hybrid_core import SimParams, simulate_hybrid
from hybridglue.observer import (
    OutputInjectionObserver,
    build_immersion_gluing,
    canonical_gain,
    estimation_error_report,
    graphical_closeness,
    lie_derivative_chain,
    reconstruct_estimate,
    run_ekf_observer,
    run_output_injection_observer,
    window_mask,
)
from hybridglue.observer import _union_measure


def test_canonical_gain_frozen():
    np.testing.assert_allclose(canonical_gain([-2.0, -3.0, -4.0]), [-9.0, -26.0, -24.0])
    obs = OutputInjectionObserver.canonical(3, [-2.0, -3.0, -4.0])
    assert obs.is_canonical() and obs.is_hurwitz()
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(obs.error_matrix).real), [-4.0, -3.0, -2.0])
    assert not OutputInjectionObserver.canonical(2, [1.0, -1.0]).is_hurwitz()


def test_lie_chain_symbolic_ball(ball):
    x1, x2 = ball.symbolic.states
    chain = lie_derivative_chain(ball.symbolic.flow, x1 ** 2, 3, states=ball.symbolic.states)
    expected = [x1 ** 2, 2 * x1 * x2, 2 * x2 ** 2 - 2 * x1, -6 * x2]
    for fn, e in zip(chain, expected):
        assert sp.simplify(fn.expr - e) == 0
    assert chain[3]([1.0, 2.0]) == pytest.approx(-12.0)


def test_lie_chain_numeric_matches_symbolic(ball):
    num = lie_derivative_chain(lambda x: ball.sys.f(x), lambda x: x[0] ** 2, 3)
    sym = lie_derivative_chain(ball.symbolic.flow, ball.symbolic.states[0] ** 2, 3, states=ball.symbolic.states)
    for x in ([2.0, -3.0], [0.5, 1.0]):
        for a, b in zip(num, sym):
            assert a(x) == pytest.approx(b(x), abs=1e-4)


def test_lie_chain_rejects_negative_order():
    with pytest.raises(OrderNonPositive):
        lie_derivative_chain(lambda x: x, lambda x: x[0], -1)
    with pytest.raises(ValueError):
        lie_derivative_chain([sp.Symbol("x")], sp.Symbol("x"), 1)


def test_immersion_gluing_reproduces_ball_psi(ball, rng):
    phi, a = ball.immersion
    c, d = ball.inv_set.sample(rng, 50), ball.sampler.jump(rng, 50)
    gm = build_immersion_gluing(ball.sys, phi, a, c_samples=c, d_samples=d, symbolic=ball.symbolic)
    np.testing.assert_allclose(gm.image(c), ball.gm.image(c), atol=1e-12)
    for x in c[:5]:
        np.testing.assert_allclose(gm.jacobian(x), ball.gm.jacobian(x), atol=1e-12)


def test_immersion_gluing_numeric_mode(ball, rng):
    phi = lambda y: y ** 2  # noqa: E731
    a = (0, lambda ys: -6 * np.sqrt(ys), 0)
    # nested finite differences straddle the kink of sqrt(y^2) at the floor, so stay clear of it
    c = ball.inv_set.sample(rng, 200)
    c = c[c[:, 0] > 0.5][:30]
    d = ball.sampler.jump(rng, 30)
    gm = build_immersion_gluing(ball.sys, phi, a, c_samples=c, d_samples=d, tol=1e-3)
    np.testing.assert_allclose(gm.image(c), ball.gm.image(c), atol=1e-6)


def test_immersion_violations(ball, rng):
    c, d = ball.inv_set.sample(rng, 30), ball.sampler.jump(rng, 30)
    # with h* = y the first derivative x2 flips sign across the bounce
    with pytest.raises(I1Violated) as info:
        build_immersion_gluing(ball.sys, lambda y: y, (0, 0), c_samples=c, d_samples=d, symbolic=ball.symbolic)
    assert info.value.residual > 1.0 and info.value.point is not None
    # dropping the injection term breaks the identity for the top derivative
    with pytest.raises(I2Violated):
        build_immersion_gluing(ball.sys, lambda y: y ** 2, (0, 0, 0), c_samples=c, d_samples=d,
                               symbolic=ball.symbolic)


def test_observer_kink_breakpoints_improve_accuracy(ball):
    ex = simulate_hybrid(ball.sys, [2.0, -3.0], SimParams(2.0))
    y = lambda t: ball.sys.h(ex.state_at(t, dense=True))  # noqa: E731
    z0 = ball.gm([2.0, -3.0])
    plain = run_output_injection_observer(ball.observer, y, z0, 2.0)
    split = run_output_injection_observer(ball.observer, y, z0, 2.0, breakpoints=ex.jump_times)
    truth = ball.gm.image(ex.sample(split.t, dense=True))
    np.testing.assert_array_equal(plain.t, split.t)
    assert np.max(np.abs(split.zeta_hat - truth)) < 1e-9
    assert np.max(np.abs(plain.zeta_hat - truth)) > 1e-8
    assert split.hurwitz is True and split.header()[:2] == ["t", "zeta_hat_1"]


def test_sampled_output_signal(ball):
    ts = np.linspace(0.0, 0.5, 11)
    with pytest.raises(SignalTooSparse):
        run_output_injection_observer(ball.observer, (ts, ts), np.zeros(3), 0.5, step=1e-3)
    ts = np.linspace(0.0, 0.5, 501)
    run = run_output_injection_observer(ball.observer, (ts, np.ones_like(ts)), np.zeros(3), 0.5, step=1e-3)
    assert run.zeta_hat.shape == (501, 3)


def test_ekf_on_ripple_converges(ripple):
    ex = simulate_hybrid(ripple.sys, [2.0, 0.0], SimParams(3.0))
    y = lambda t: ripple.sys.h(ex.state_at(t, dense=True))  # noqa: E731
    e = ripple.ekf
    run = run_ekf_observer(ripple.glued, y, [1.5, 0.5], e["Q"], e["R"], 3.0, P0=e["P0"], breakpoints=ex.jump_times)
    truth = ripple.gm.image(ex.sample(run.t, dense=True))
    err = np.linalg.norm(run.zeta_hat - truth, axis=1)
    assert err[0] > 0.5 and err[-1] < 0.05
    assert np.max(err[run.t > 2.5]) < err[0] / 20


def test_ekf_covariance_divergence(ripple):
    with pytest.raises(CovarianceDivergence):
        run_ekf_observer(ripple.glued, lambda t: np.array([2.0]), [2.0, 0.0], 1e9, [[1e-4]], 0.1)


def test_reconstruct_estimate_on_image(ball, ripple, rng):
    for b in (ball, ripple):
        x = b.inv_set.sample(rng, 5)
        x_hat, zeta_bar = reconstruct_estimate(b.glued, b.gm.image(x))
        np.testing.assert_allclose(x_hat, x, atol=1e-6)
        np.testing.assert_allclose(zeta_bar, b.gm.image(x), atol=1e-6)


# --- error reports ------------------------------------------------------------------

def test_error_report_exponential():
    t = np.linspace(0.0, 10.0, 1001)
    x = np.exp(-t)[:, None]
    rep = estimation_error_report(t, x, np.zeros_like(x), [], 0.0, 0.05)
    assert rep.T == pytest.approx(2.99)
    assert rep.max_err_on_windows < 0.05 and rep.passed
    assert rep.to_dict()["pass"] is True


def test_error_report_excludes_windows():
    t = np.linspace(0.0, 10.0, 1001)
    err = np.where(np.abs(t - 6.0) < 0.035, 1.0, 0.0)[:, None]
    assert estimation_error_report(t, err, 0 * err, [6.0], 0.1, 0.05).T == 0.0
    rep = estimation_error_report(t, err, 0 * err, [6.0], 0.01, 0.05)
    assert rep.T == pytest.approx(6.03)
    # alpha may be a dwell function of eps
    assert estimation_error_report(t, err, 0 * err, [6.0], lambda eps: 2 * eps, 0.05).T == 0.0


def test_error_report_unsettled():
    t = np.linspace(0.0, 1.0, 11)
    x = np.ones((11, 1))
    rep = estimation_error_report(t, x, 0 * x, [], 0.0, 0.5)
    assert rep.T is None and not rep.passed and rep.max_err_on_windows == 1.0


def test_union_measure_and_window_mask():
    assert _union_measure([0.0, 1.0, 1.1], 0.2, 0.0, 2.0) == pytest.approx(0.2 + 0.5)
    assert _union_measure([], 0.2, 0.0, 2.0) == 0.0
    mask = window_mask(np.array([0.05, 0.5, 1.0, 1.5]), [1.0], 0.1)
    assert mask.tolist() == [True, False, True, False]
    assert not window_mask(np.array([0.0]), [], 0.0).any()


def _sawtooth(t, shift=0.0):
    return (((t - shift) % 1.0) * 2.0)[:, None]


def test_graphical_closeness_tolerates_time_shift():
    # the horizon stops before the next reset so both signals have all their jumps inside it
    t = np.linspace(0.0, 4.5, 4501)
    x, x_hat = _sawtooth(t), _sawtooth(t, 0.01)
    # in sup norm the error spikes at every reset, so it never settles before the last one
    assert estimation_error_report(t, x, x_hat, [], 0.0, 0.1).T >= 4.0
    res = graphical_closeness(t, x, x_hat, 0.1, 0.05)
    # only the shifted signal's first reset at t = 0.01 lacks a partner
    assert res.passed and res.T_star <= 0.01 and res.worst_gap < 0.1


def test_graphical_closeness_fails_for_offset():
    t = np.linspace(0.0, 5.0, 501)
    res = graphical_closeness(t, _sawtooth(t), _sawtooth(t) + 0.5, 0.1, 0.05)
    assert not res.passed and res.T_star is None and res.worst_gap >= 0.1
    with pytest.raises(ValueError):
        graphical_closeness(t, _sawtooth(t), _sawtooth(t), 0.1, 0.05, alpha=0.1)
