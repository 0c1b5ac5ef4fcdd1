"""Tracking control through a gluing map.

References and plant are compared in glued coordinates, where the reference
is continuous even when it jumps.  When the pushed-forward input vector
fields disagree across the seam, an input transform gamma and offset kappa
absorb the mismatch so that the glued control system is continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._numerics import next_breakpoint, rk4_step
from .errors import MatchingViolation, NotHurwitz, NotInputAffine, SingularGamma
from .gluing import GluedTrajectory, GluingMap
from .hybrid_core import CheckResult, HybridExecution, HybridSystem, SimParams, _worst, simulate_hybrid
from .observer import ErrorReport, estimation_error_report


@dataclass
class ReferenceBundle:
    """A reference state trajectory stored as a precomputed execution."""

    execution: HybridExecution
    u_r: Callable
    R_set: Optional[Callable] = None

    @property
    def r_jump_times(self):
        return self.execution.jump_times

    def __post_init__(self):
        self._cache = {}

    def r(self, t):
        """Dense reference state; recent lookups are memoised since RK4 stages repeat times."""
        t = float(t)
        hit = self._cache.get(t)
        if hit is None:
            if len(self._cache) > 64:
                self._cache.clear()
            hit = self._cache[t] = self.execution.state_at(t, dense=True)
        return hit.copy()

    def u(self, t):
        return np.atleast_1d(np.asarray(self.u_r(t), dtype=float))

    def breakpoints(self, t_end=None):
        """Reference jump times together with the switch times of ``u_r``."""
        t_end = self.execution.t_end if t_end is None else t_end
        pts = list(self.r_jump_times) + list(input_breakpoints(self.u_r, t_end))
        return np.unique(np.asarray(pts, dtype=float))


def input_breakpoints(u, t_end):
    fn = getattr(u, "breakpoints", None)
    return np.asarray(fn(t_end) if fn is not None else [], dtype=float)


def make_reference(sys: HybridSystem, r0, u_r, params: SimParams, R_set=None) -> ReferenceBundle:
    execution = simulate_hybrid(sys, r0, params, input=lambda t, x: u_r(t),
                                breakpoints=input_breakpoints(u_r, params.t_end))
    return ReferenceBundle(execution, u_r, R_set)


def check_reference(sys: HybridSystem, ref: ReferenceBundle, params: SimParams, n_check=400) -> dict:
    """Re-simulation and containment checks for a stored reference."""
    again = simulate_hybrid(sys, ref.execution.x0, params, input=lambda t, x: ref.u_r(t),
                            breakpoints=input_breakpoints(ref.u_r, params.t_end))
    grid = np.linspace(0.0, min(again.t_end, ref.execution.t_end), n_check)
    stored = ref.execution.sample(grid, dense=True)
    fresh = again.sample(grid, dense=True)
    out = {
        "C1_resimulation": _worst(np.linalg.norm(stored - fresh, axis=1), stored, 1e-5),
        "C1_in_flow_set": _worst([0.0 if sys.in_flow_set(x) else 1.0 for x in stored], stored, 0.0),
    }
    if ref.R_set is not None:
        out["C2_contained"] = _worst([0.0 if ref.R_set(x) else 1.0 for x in stored], stored, 0.0)
    return out


@dataclass(frozen=True)
class MatchingFeedback:
    gamma: Callable
    kappa: Callable

    def gamma_mat(self, x):
        return np.atleast_2d(np.asarray(self.gamma(x), dtype=float))

    def kappa_vec(self, x):
        return np.atleast_1d(np.asarray(self.kappa(x), dtype=float))


def identity_feedback(p):
    return MatchingFeedback(lambda x: np.eye(p), lambda x: np.zeros(p))


@dataclass(frozen=True)
class GluedTrackingLaw:
    v_c: Callable

    def __call__(self, v_r, zeta_r, zeta):
        return np.atleast_1d(np.asarray(self.v_c(v_r, zeta_r, zeta), dtype=float))


def linear_tracking_law(K, A=None, B=None, margin=1e-6) -> GluedTrackingLaw:
    """v_c = K (zeta - zeta_r) + v_r, optionally verifying that A + B K is Hurwitz."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if A is not None and B is not None:
        eig = np.linalg.eigvals(np.asarray(A, float) + np.asarray(B, float).reshape(-1, K.shape[0]) @ K)
        if np.max(eig.real) >= -margin:
            raise NotHurwitz(f"A + B K has eigenvalues {eig}")
    return GluedTrackingLaw(lambda v_r, zeta_r, zeta: K @ (np.asarray(zeta) - np.asarray(zeta_r)) + v_r)


def _require_affine(sys):
    if sys.drift is None or sys.input_matrix is None:
        raise NotInputAffine(f"{sys.name} does not expose drift/input_matrix")


def _b(sys, x):
    return np.asarray(sys.input_matrix(x), dtype=float).reshape(sys.n, sys.p)


def check_relaxed_matching(sys: HybridSystem, gm: GluingMap, mf: MatchingFeedback, d_samples,
                           tol=1e-8) -> dict:
    """Residuals of the gamma (input) and kappa (drift) seam conditions on D."""
    _require_affine(sys)
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))
    res_b, res_a = [], []
    for x in d_samples:
        gx = sys.g(x)
        jx, jg = gm.jacobian(x), gm.jacobian(gx)
        bx = jx @ _b(sys, x) @ mf.gamma_mat(x)
        bg = jg @ _b(sys, gx) @ mf.gamma_mat(gx)
        res_b.append(float(np.linalg.norm(bx - bg)))
        lhs = jx @ sys.drift(x) + bx @ mf.kappa_vec(x)
        rhs = jg @ sys.drift(gx) + bx @ mf.kappa_vec(gx)
        res_a.append(float(np.linalg.norm(lhs - rhs)))
    return {"b_condition": _worst(res_b, d_samples, tol), "a_condition": _worst(res_a, d_samples, tol)}


@dataclass
class MatchedGluedControlSystem:
    """zeta' = a_kg(zeta) + b_g(zeta) v, continuous across psi(D)."""

    sys: HybridSystem
    gm: GluingMap
    mf: MatchingFeedback
    seam_residual: float = 0.0

    def a_psi(self, zeta):
        x = self.gm.inverse(zeta)
        return self.gm.jacobian(x) @ self.sys.drift(x)

    def b_psi(self, zeta):
        x = self.gm.inverse(zeta)
        return self.gm.jacobian(x) @ _b(self.sys, x)

    def a_kg(self, zeta):
        x = self.gm.inverse(zeta)
        jac = self.gm.jacobian(x)
        return jac @ self.sys.drift(x) + jac @ _b(self.sys, x) @ self.mf.gamma_mat(x) @ self.mf.kappa_vec(x)

    def b_g(self, zeta):
        x = self.gm.inverse(zeta)
        return self.gm.jacobian(x) @ _b(self.sys, x) @ self.mf.gamma_mat(x)

    def f(self, zeta, v):
        return self.a_kg(zeta) + self.b_g(zeta) @ np.atleast_1d(v)


def _one_sided(sys, gm, mf, x):
    jac = gm.jacobian(x)
    bg = jac @ _b(sys, x) @ mf.gamma_mat(x)
    return jac @ sys.drift(x) + bg @ mf.kappa_vec(x), bg


def build_matched_glued_control_system(sys: HybridSystem, gm: GluingMap, mf: MatchingFeedback,
                                       d_samples) -> MatchedGluedControlSystem:
    report = check_relaxed_matching(sys, gm, mf, d_samples)
    bad = [k for k, v in report.items() if not v.passed]
    if bad:
        raise MatchingViolation(f"relaxed matching fails: {', '.join(bad)}")
    seam = 0.0
    for x in np.atleast_2d(d_samples):
        a1, b1 = _one_sided(sys, gm, mf, x)
        a2, b2 = _one_sided(sys, gm, mf, sys.g(x))
        seam = max(seam, float(np.linalg.norm(a1 - a2)), float(np.linalg.norm(b1 - b2)))
    return MatchedGluedControlSystem(sys, gm, mf, seam)


def tracking_controller(mf: MatchingFeedback, gm: GluingMap, law: GluedTrackingLaw, det_tol=1e-8):
    """u_c(u_r, r, x) = gamma(x) (v_c(gamma(r)^-1 (u_r - kappa(r)), psi(r), psi(x)) + kappa(x))."""

    def u_c(u_r, r, x):
        g_r = mf.gamma_mat(r)
        g_x = mf.gamma_mat(x)
        for g, at in ((g_r, r), (g_x, x)):
            det = g[0, 0] if g.shape == (1, 1) else np.linalg.det(g)
            if abs(det) <= det_tol:
                raise SingularGamma(f"gamma is singular at {np.asarray(at).tolist()}")
        rhs = np.atleast_1d(u_r) - mf.kappa_vec(r)
        v_r = rhs / g_r[0, 0] if g_r.shape == (1, 1) else np.linalg.solve(g_r, rhs)
        return g_x @ (law(v_r, gm(r), gm(x)) + mf.kappa_vec(x))

    return u_c


@dataclass
class TrackingRun:
    t: np.ndarray
    x: np.ndarray
    r: np.ndarray
    zeta: np.ndarray
    zeta_r: np.ndarray
    u: np.ndarray
    u_r: np.ndarray
    glued_err: np.ndarray
    execution: HybridExecution
    reference: ReferenceBundle
    notes: list = field(default_factory=list)

    def header(self):
        n, m, p = self.x.shape[1], self.zeta.shape[1], self.u.shape[1]
        cols = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"r_{i + 1}" for i in range(n)]
        cols += [f"zeta_{i + 1}" for i in range(m)] + [f"zeta_r_{i + 1}" for i in range(m)]
        cols += ["u"] if p == 1 else [f"u_{i + 1}" for i in range(p)]
        cols += ["u_r"] if p == 1 else [f"u_r_{i + 1}" for i in range(p)]
        return cols + ["glued_err"]

    def iter_rows(self):
        for k, t in enumerate(self.t):
            yield ([float(t)] + list(self.x[k]) + list(self.r[k]) + list(self.zeta[k]) + list(self.zeta_r[k])
                   + list(self.u[k]) + list(self.u_r[k]) + [float(self.glued_err[k])])


def simulate_closed_loop(sys: HybridSystem, u_c, ref: ReferenceBundle, x0, params: SimParams,
                         gm: GluingMap) -> TrackingRun:
    """Plant under u = u_c(u_r(t), r(t), x); plant jumps fire on its own D."""

    def input_fn(t, x):
        return u_c(ref.u(t), ref.r(t), x)

    execution = simulate_hybrid(sys, x0, params, input=input_fn, breakpoints=ref.breakpoints(params.t_end))
    n = int(round(execution.t_end / params.step))
    grid = np.arange(n + 1) * params.step
    grid[-1] = execution.t_end
    xs = execution.sample(grid, dense=True)
    rs = np.array([ref.r(t) for t in grid])
    zs, zrs = gm.image(xs), gm.image(rs)
    us = np.array([np.atleast_1d(u_c(ref.u(t), r, x)) for t, r, x in zip(grid, rs, xs)])
    urs = np.array([ref.u(t) for t in grid])
    err = np.linalg.norm(zs - zrs, axis=1)
    return TrackingRun(grid, xs, rs, zs, zrs, us, urs, err, execution, ref)


def simulate_glued_closed_loop(mgs: MatchedGluedControlSystem, law: GluedTrackingLaw, ref: ReferenceBundle,
                               zeta0, t_end, step=1e-3) -> GluedTrajectory:
    """Direct RK4 of zeta' = a_kg(zeta) + b_g(zeta) v_c(v_r(t), zeta_r(t), zeta)."""
    mf, gm = mgs.mf, mgs.gm

    def field_(t, zeta):
        r = ref.r(t)
        v_r = np.linalg.solve(mf.gamma_mat(r), ref.u(t) - mf.kappa_vec(r))
        return mgs.f(zeta, law(v_r, gm(r), zeta))

    bps = ref.breakpoints(t_end)
    t, z = 0.0, np.asarray(zeta0, dtype=float).copy()
    ts, zs = [t], [z.copy()]
    while t_end - t > 1e-12:
        h = min(step, t_end - t)
        bp = next_breakpoint(bps, t)
        at_bp = bp - t <= h
        if at_bp:
            h = bp - t
        z = rk4_step(field_, t, z, h, left_end=at_bp)
        t = bp if at_bp else t + h
        ts.append(t)
        zs.append(z.copy())
    return GluedTrajectory(np.array(ts), np.array(zs))


def tracking_error_report(run: TrackingRun, alpha, eps) -> ErrorReport:
    """Windowed |x - r| report around the reference's jump times."""
    return estimation_error_report(run.t, run.x, run.r, run.reference.r_jump_times, alpha, eps)


def glued_error_continuity(run: TrackingRun, field_bound) -> CheckResult:
    """Largest grid-to-grid change of |zeta - zeta_r| against step * field_bound."""
    steps = np.abs(np.diff(run.glued_err))
    dt = np.diff(run.t)
    ratio = steps / np.maximum(dt * field_bound, 1e-300)
    k = int(np.argmax(ratio))
    return CheckResult(bool(ratio[k] <= 1.0), float(steps[k]), [float(run.t[k]), float(run.t[k + 1])],
                       note=f"bound = step * {field_bound:.3g}")


def largest_converging_radius(sys, u_c, ref, gm, params, direction, r_max=10.0, iters=8, tol=1e-2):
    """Bisection on the initial glued error along ``direction`` for convergence by ``params.t_end``."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    z0 = gm(ref.r(0.0))

    def converges(radius):
        try:
            x0 = gm.inverse(z0 + radius * direction)
            run = simulate_closed_loop(sys, u_c, ref, x0, params, gm)
        except Exception:  # noqa: BLE001 - any failure counts as non-convergence
            return False
        return bool(run.glued_err[-1] < tol)

    if converges(r_max):
        return r_max
    lo, hi = 0.0, r_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if converges(mid) else (lo, mid)
    return lo
