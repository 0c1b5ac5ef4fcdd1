"""State observers that run on the glued domain.

The observer never sees the plant's jumps: it integrates a continuous-time
observer for the glued system, projects its state onto psi(E) and maps the
result back through psi^-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import expm

from ._numerics import jacobian_fd, rk4_span
from .errors import CovarianceDivergence, I1Violated, I2Violated, OrderNonPositive, SignalTooSparse
from .gluing import GluedSystem, GluingMap, project_to_invariant
from .hybrid_core import HybridSystem

HURWITZ_MARGIN = 0.1


# --- Lie derivatives -----------------------------------------------------------


class LieFunction:
    """Callable wrapper around a scalar function of the state.

    ``expr`` is set when the function came from a symbolic computation.
    """

    def __init__(self, fn, expr=None):
        self._fn = fn
        self.expr = expr

    def __call__(self, x):
        return self._fn(np.asarray(x, dtype=float))


def _lambdify_scalar(expr, states):
    lam = sp.lambdify(states, expr, "numpy")

    def fn(x):
        x = np.asarray(x, dtype=float)
        val = lam(*[x[..., i] for i in range(len(states))])
        return np.broadcast_to(np.asarray(val, dtype=float), x.shape[:-1]).copy() if x.ndim > 1 else float(val)

    return fn


def _lambdify_vector(exprs, states):
    parts = [_lambdify_scalar(e, states) for e in exprs]

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.asarray(p(x), dtype=float) for p in parts], axis=-1)

    return fn


def _lie_symbolic(expr, f_exprs, states):
    return sp.expand(sum(sp.diff(expr, s) * fi for s, fi in zip(states, f_exprs)))


def _lie_numeric(fn, f, step):
    # derivative of fn along the integral direction f(x): five-point stencil
    def lie(x):
        x = np.asarray(x, dtype=float)
        v = np.asarray(f(x), dtype=float)
        speed = np.linalg.norm(v)
        if speed == 0.0:
            return 0.0
        s = step * max(1.0, np.linalg.norm(x)) / speed
        vals = [fn(x + k * s * v) for k in (-2, -1, 1, 2)]
        return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * s)

    return lie


def lie_derivative_chain(f, h_star, order, states=None, fd_step=1e-3) -> list:
    """Return ``[h*, L_f h*, ..., L_f^order h*]`` as callables.

    With sympy ``f`` (a sequence of expressions in ``states``) and ``h_star``
    the derivatives are exact.  With plain callables they are nested
    finite differences along f, good to roughly 1e-4.
    """
    if order < 0:
        raise OrderNonPositive("order must be non-negative")
    if isinstance(h_star, sp.Basic):
        if states is None:
            raise ValueError("symbolic mode needs the state symbols")
        exprs = [sp.sympify(h_star)]
        for _ in range(order):
            exprs.append(_lie_symbolic(exprs[-1], list(f), states))
        return [LieFunction(_lambdify_scalar(e, states), e) for e in exprs]
    chain = [LieFunction(lambda x: float(np.asarray(h_star(x), dtype=float)))]
    for _ in range(order):
        chain.append(LieFunction(_lie_numeric(chain[-1], f, fd_step)))
    return chain


@dataclass(frozen=True)
class SymbolicModel:
    """Sympy description of an autonomous flow and output, for exact Lie derivatives."""

    states: tuple
    flow: tuple
    output: object


def build_immersion_gluing(sys: HybridSystem, phi, a_funcs: Sequence, *, c_samples, d_samples,
                           symbolic: Optional[SymbolicModel] = None, psi_inv=None,
                           tol=1e-6) -> GluingMap:
    """Stacked-Lie-derivative gluing map for a system linear up to output injection.

    ``phi`` and every entry of ``a_funcs`` map the transformed output y* to a
    scalar; constants are accepted for the a_i.  In symbolic mode they must
    accept sympy expressions (use ``sympy.sqrt`` and friends).

    The matching of L_f^i h* across the jump is checked for i < m; the m-th
    derivative enters psi only through the injection identity, which is
    checked on ``c_samples``.
    """
    m = len(a_funcs)
    c_samples = np.atleast_2d(np.asarray(c_samples, dtype=float))
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))

    if symbolic is not None:
        states, fx = list(symbolic.states), list(symbolic.flow)
        h_star = sp.sympify(phi(symbolic.output))

        def a_of(i):
            ai = a_funcs[i]
            return sp.sympify(ai(h_star) if callable(ai) else ai)

        def lie_k(expr, k):
            for _ in range(k):
                expr = _lie_symbolic(expr, fx, states)
            return expr

        lh = [h_star]
        for _ in range(m):
            lh.append(_lie_symbolic(lh[-1], fx, states))
        comps = []
        for j in range(m):
            comps.append(sp.simplify(lh[j] - sum(lie_k(a_of(i), j - 1 - i) for i in range(j))))
        identity = lh[m] - a_of(m - 1) - sum(lie_k(a_of(i), m - 1 - i) for i in range(m - 1))
        lie_fns = [_lambdify_scalar(e, states) for e in lh]
        ident_fn = _lambdify_scalar(sp.simplify(identity), states)
        psi = _lambdify_vector(comps, states)
        jac_exprs = sp.Matrix(comps).jacobian(states)
        jac_fns = [[_lambdify_scalar(jac_exprs[r, c], states) for c in range(len(states))] for r in range(m)]

        def d_psi(x):
            return np.array([[fn(x) for fn in row] for row in jac_fns], dtype=float)
    else:
        f = lambda x: sys.f(x)  # noqa: E731
        h_star_fn = lambda x: float(phi(float(sys.h(x)[0])))  # noqa: E731
        lie_fns = lie_derivative_chain(f, h_star_fn, m)

        def a_fn(i):
            ai = a_funcs[i]
            return (lambda x: float(ai(h_star_fn(x)))) if callable(ai) else (lambda x: float(ai))

        a_chains = [lie_derivative_chain(f, a_fn(i), m) for i in range(m)]

        def psi_row(x):
            return np.array([lie_fns[j](x) - sum(a_chains[i][j - 1 - i](x) for i in range(j))
                             for j in range(m)])

        def psi(x):
            x = np.asarray(x, dtype=float)
            if x.ndim > 1:
                return np.array([psi_row(r) for r in x])
            return psi_row(x)

        def ident_fn(x):
            return lie_fns[m](x) - a_chains[m - 1][0](x) - sum(a_chains[i][m - 1 - i](x) for i in range(m - 1))

        d_psi = None

    i1 = []
    for x in d_samples:
        gx = sys.g(x)
        i1.append(max((abs(lie_fns[i](x) - lie_fns[i](gx)) for i in range(1, m)), default=0.0))
    k1 = int(np.argmax(i1))
    if i1[k1] > tol:
        raise I1Violated(f"L_f^i h* differs across the jump by {i1[k1]:.3e}", i1[k1], d_samples[k1].tolist())
    i2 = [abs(float(ident_fn(x))) for x in c_samples]
    k2 = int(np.argmax(i2))
    if not np.isfinite(i2[k2]) or i2[k2] > tol:
        raise I2Violated(f"injection identity residual {i2[k2]:.3e}", i2[k2], c_samples[k2].tolist())
    return GluingMap(m=m, psi=psi, psi_inv=psi_inv, d_psi=d_psi, name="immersion")


# --- output-injection observer -------------------------------------------------


def shift_matrix(m):
    return np.eye(m, k=1)


def canonical_gain(poles):
    """Gain L placing eig(A + L C) at ``poles`` for the shift pair (A, e1^T)."""
    coeffs = np.real(np.poly(poles))
    return -coeffs[1:]


@dataclass(frozen=True)
class OutputInjectionObserver:
    """zeta_hat' = A zeta_hat + L (C zeta_hat - phi(y)) + a(phi(y)) + B_inj y."""

    A: np.ndarray
    C_row: np.ndarray
    L: np.ndarray
    a: Optional[Callable] = None
    phi: Optional[Callable] = None
    B_inj: Optional[np.ndarray] = None

    @classmethod
    def canonical(cls, m, poles, a=None, phi=None, B_inj=None):
        c_row = np.zeros(m)
        c_row[0] = 1.0
        return cls(shift_matrix(m), c_row, canonical_gain(poles), a, phi,
                   None if B_inj is None else np.asarray(B_inj, dtype=float))

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def error_matrix(self):
        return self.A + np.outer(self.L, self.C_row)

    def is_canonical(self) -> bool:
        e1 = np.zeros(self.m)
        e1[0] = 1.0
        return bool(np.array_equal(self.A, shift_matrix(self.m)) and np.array_equal(self.C_row, e1))

    def is_hurwitz(self, margin=HURWITZ_MARGIN) -> bool:
        return bool(np.max(np.linalg.eigvals(self.error_matrix).real) <= -margin)

    def rhs(self, zeta_hat, y):
        y = float(np.atleast_1d(y)[0])
        y_star = self.phi(y) if self.phi is not None else y
        out = self.A @ zeta_hat + self.L * (self.C_row @ zeta_hat - y_star)
        if self.a is not None:
            out = out + np.asarray(self.a(y_star), dtype=float)
        if self.B_inj is not None:
            out = out + self.B_inj * y
        return out


@dataclass
class ObserverRun:
    t: np.ndarray
    zeta_hat: np.ndarray
    zeta_bar: Optional[np.ndarray] = None
    x_hat: Optional[np.ndarray] = None
    e_glued: Optional[np.ndarray] = None
    hurwitz: Optional[bool] = None
    notes: list = field(default_factory=list)

    def iter_rows(self):
        for k, t in enumerate(self.t):
            row = [float(t)] + list(self.zeta_hat[k])
            if self.zeta_bar is not None:
                row += list(self.zeta_bar[k]) + list(self.x_hat[k])
            if self.e_glued is not None:
                row.append(float(self.e_glued[k]))
            yield row

    def header(self):
        m = self.zeta_hat.shape[1]
        cols = ["t"] + [f"zeta_hat_{i + 1}" for i in range(m)]
        if self.zeta_bar is not None:
            cols += [f"zeta_bar_{i + 1}" for i in range(m)]
            cols += [f"x_hat_{i + 1}" for i in range(self.x_hat.shape[1])]
        if self.e_glued is not None:
            cols.append("e_glued")
        return cols


def _signal(y, step):
    if callable(y):
        return y
    ts, ys = (np.asarray(a, dtype=float) for a in y)
    if ts.size < 2 or np.max(np.diff(ts)) > step * (1 + 1e-9):
        raise SignalTooSparse("output samples are spaced wider than the observer step")
    if ys.ndim == 1:
        return lambda t: np.interp(t, ts, ys)
    return lambda t: np.array([np.interp(t, ts, ys[:, i]) for i in range(ys.shape[1])])


def _time_grid(t_end, step):
    n = int(np.ceil(t_end / step - 1e-9))
    grid = np.arange(n + 1) * step
    grid[-1] = t_end
    return grid


def _kinks(breakpoints):
    return None if breakpoints is None else np.sort(np.asarray(breakpoints, dtype=float))


def run_output_injection_observer(obs: OutputInjectionObserver, y, zeta_hat0, t_end, step=1e-3,
                                  breakpoints=None) -> ObserverRun:
    """Integrate the observer driven by the output signal ``y``.

    ``y`` is a callable of time or a ``(t_samples, y_samples)`` pair that is
    linearly interpolated.  ``breakpoints`` lists times where the signal has
    a kink (the output at a jump); steps are split there but the stored grid
    stays uniform.
    """
    kinks = _kinks(breakpoints)
    y_fn = _signal(y, step)
    field_ = lambda t, z: obs.rhs(z, y_fn(t))  # noqa: E731
    grid = _time_grid(t_end, step)
    zs = np.empty((grid.size, obs.m))
    z = np.asarray(zeta_hat0, dtype=float).copy()
    zs[0] = z
    for k in range(1, grid.size):
        z = rk4_span(field_, grid[k - 1], grid[k], z, kinks)
        zs[k] = z
    run = ObserverRun(grid, zs, hurwitz=obs.is_hurwitz())
    if not run.hurwitz:
        run.notes.append("A + L C is not Hurwitz with the required margin")
    return run


def run_ekf_observer(gs: GluedSystem, y, zeta_hat0, Q, R, t_end, step=1e-3, P0=None,
                     breakpoints=None) -> ObserverRun:
    """Continuous-discrete extended Kalman filter on the glued system.

    Prediction by RK4 with a matrix-exponential covariance step; an update
    with the sampled output after every step.  Linearisations are finite
    differences of f_psi and h_psi.  ``breakpoints`` splits the prediction
    step as in :func:`run_output_injection_observer`.
    """
    y_fn = _signal(y, step)
    kinks = _kinks(breakpoints)
    m = gs.m
    Q = np.atleast_2d(np.asarray(Q, dtype=float)) * (np.eye(m) if np.ndim(Q) == 0 else 1.0)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = np.eye(m) if P0 is None else np.asarray(P0, dtype=float)
    grid = _time_grid(t_end, step)
    zs = np.empty((grid.size, m))
    z = np.asarray(zeta_hat0, dtype=float).copy()
    zs[0] = z
    field_ = lambda t, v: gs.f(v)  # noqa: E731
    for k in range(1, grid.size):
        h = grid[k] - grid[k - 1]
        F = jacobian_fd(gs.f, z, 1e-6)
        Phi = expm(F * h)
        z = rk4_span(field_, grid[k - 1], grid[k], z, kinks)
        P = Phi @ P @ Phi.T + Q * h
        H = jacobian_fd(gs.h, z, 1e-6)
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        z = z + K @ (np.atleast_1d(y_fn(grid[k])) - gs.h(z))
        P = (np.eye(m) - K @ H) @ P
        P = 0.5 * (P + P.T)
        if np.trace(P) > 1e6:
            raise CovarianceDivergence(f"trace P = {np.trace(P):.3e} at t={grid[k]}")
        zs[k] = z
    run = ObserverRun(grid, zs)
    run.notes.append("EKF on the glued system (stand-in for a Lipschitz-observer design)")
    return run


def reconstruct_estimate(gs: GluedSystem, zeta_hat) -> tuple:
    """x_hat = psi^-1(Pi(zeta_hat)) row by row; returns ``(x_hat, zeta_bar)``."""
    zeta_hat = np.atleast_2d(np.asarray(zeta_hat, dtype=float))
    x_hat = np.empty((zeta_hat.shape[0], gs.sys.n))
    zeta_bar = np.empty_like(zeta_hat)
    warm = None
    for k, z in enumerate(zeta_hat):
        res = project_to_invariant(gs, z, warm_start=warm)
        warm = res.theta
        zeta_bar[k] = res.zeta_bar
        # psi^-1 of a point of psi(E) is the parameterised preimage up to the seam convention
        x_hat[k] = gs.gm.inverse(res.zeta_bar) if gs.gm.psi_inv is not None else res.x
    return x_hat, zeta_bar


# --- error metrics ---------------------------------------------------------------


@dataclass
class ErrorReport:
    epsilon: float
    alpha: float
    T: Optional[float]
    max_err_on_windows: float
    excluded_measure: float

    @property
    def passed(self) -> bool:
        return self.T is not None and self.max_err_on_windows < self.epsilon

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "T": self.T,
            "max_err_on_windows": self.max_err_on_windows,
            "excluded_measure": self.excluded_measure,
            "pass": self.passed,
        }


def _union_measure(centers, radius, lo, hi):
    total, cur_a, cur_b = 0.0, None, None
    for c in sorted(centers):
        a, b = max(lo, c - radius), min(hi, c + radius)
        if b <= a:
            continue
        if cur_b is None or a > cur_b:
            if cur_b is not None:
                total += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    if cur_b is not None:
        total += cur_b - cur_a
    return total


def window_mask(t, jump_times, alpha):
    """True where t lies within ``alpha`` of 0 or of a jump time."""
    t = np.asarray(t, dtype=float)
    centers = np.concatenate([[0.0], np.asarray(jump_times, dtype=float)])
    if alpha <= 0:
        return np.zeros(t.shape, dtype=bool)
    return np.any(np.abs(t[:, None] - centers[None, :]) < alpha, axis=1)


def estimation_error_report(t, x, x_hat, jump_times, alpha, eps) -> ErrorReport:
    """Settling time of |x - x_hat| < eps off the jump windows.

    ``alpha`` is a dwell function of eps or a constant half-window.  When the
    error is still above eps at the last admissible sample the report has
    ``T = None`` and carries the achieved supremum.
    """
    t = np.asarray(t, dtype=float)
    a = float(alpha(eps) if callable(alpha) else alpha)
    err = np.linalg.norm(np.atleast_2d(x) - np.atleast_2d(x_hat), axis=1)
    keep = ~window_mask(t, jump_times, a)
    centers = np.concatenate([[0.0], np.asarray(jump_times, dtype=float)])
    excluded = _union_measure(centers, a, float(t[0]), float(t[-1]))
    if not np.any(keep):
        return ErrorReport(eps, a, None, float("nan"), excluded)
    idx = np.flatnonzero(keep)
    bad = idx[err[idx] >= eps]
    if bad.size and bad[-1] == idx[-1]:
        return ErrorReport(eps, a, None, float(err[idx].max()), excluded)
    T = float(t[bad[-1]]) if bad.size else 0.0
    after = idx[t[idx] > T] if bad.size else idx
    return ErrorReport(eps, a, T, float(err[after].max()), excluded)


@dataclass
class ClosenessResult:
    passed: bool
    T_star: Optional[float]
    worst_t: Optional[float]
    worst_gap: float


def _directional_gaps(t, a, b, w):
    # min over s in [t - w, t + w] of |(t - s, a(t) - b(s))|
    n = t.size
    pad_t = np.concatenate([np.full(w, np.inf), t, np.full(w, np.inf)])
    pad_b = np.concatenate([np.repeat(b[:1], w, 0), b, np.repeat(b[-1:], w, 0)])
    win_t = sliding_window_view(pad_t, 2 * w + 1)[:n]
    win_b = sliding_window_view(pad_b, 2 * w + 1, axis=0)[:n]  # (n, dim, 2w+1)
    dt = t[:, None] - win_t
    dx = a[:, :, None] - win_b
    dist = np.sqrt(dt**2 + np.sum(dx**2, axis=1))
    return dist.min(axis=1)


def graphical_closeness(t, x, x_hat, eps_star, search_window, alpha=None) -> ClosenessResult:
    """Both graphical-closeness conditions on a uniform grid, with the least T*."""
    if alpha is not None:
        a = float(alpha(eps_star) if callable(alpha) else alpha)
        if search_window < 2 * a:
            raise ValueError("search window must be at least twice the dwell half-window")
    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    dt = float(np.median(np.diff(t)))
    w = max(1, int(np.ceil(search_window / dt)))
    gaps = np.maximum(_directional_gaps(t, x, x_hat, w), _directional_gaps(t, x_hat, x, w))
    ok = gaps < eps_star
    if not ok[-1]:
        k = int(np.argmax(gaps))
        return ClosenessResult(False, None, float(t[k]), float(gaps[k]))
    bad = np.flatnonzero(~ok)
    T_star = float(t[bad[-1]]) if bad.size else float(t[0])
    tail = gaps[t > T_star] if bad.size else gaps
    k = int(np.argmax(tail))
    return ClosenessResult(True, T_star, float(t[t > T_star][k] if bad.size else t[k]), float(tail[k]))
