"""Gluing functions: axiom checks, matching conditions and the glued system.

A gluing function psi identifies every jump-set point x with its image g(x),
so ``zeta(t) = psi(x(t))`` is continuous even though ``x(t)`` jumps.  When
the pushed-forward vector fields agree on both sides of the seam the glued
dynamics ``zeta' = f_psi(zeta)`` are an ordinary ODE.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from ._numerics import apply_rows, jacobian_fd, null_space, rk4_step
from .errors import (
    LeftGluedDomain,
    MatchingViolation,
    NoOutputMap,
    NoParameterization,
    NotInGluedDomain,
    SamplerEmpty,
)
from .hybrid_core import CheckResult, HybridSystem, _input_grid, _worst

FD_STEP = 1e-6


@dataclass(frozen=True)
class GluingMap:
    """psi: C -> R^m with optional analytic Jacobian and inverse on psi(C).

    ``psi`` and ``psi_inv`` should broadcast over a leading batch axis; the
    checkers fall back to row-wise evaluation when they do not.
    """

    m: int
    psi: Callable
    psi_inv: Optional[Callable] = None
    d_psi: Optional[Callable] = None
    name: str = "psi"

    def __call__(self, x):
        return np.asarray(self.psi(np.asarray(x, dtype=float)), dtype=float)

    def image(self, points):
        return apply_rows(self.psi, points, self.m)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        if self.d_psi is not None:
            return np.atleast_2d(np.asarray(self.d_psi(x), dtype=float))
        return jacobian_fd(self.psi, x, FD_STEP, method="forward")

    def inverse(self, zeta):
        if self.psi_inv is None:
            raise NotInGluedDomain(f"{self.name} has no inverse")
        return np.asarray(self.psi_inv(np.asarray(zeta, dtype=float)), dtype=float)


@dataclass(frozen=True)
class InvariantSetSpec:
    """Compact set E given by a membership test and a box parameterisation."""

    membership: Callable
    parameterization: Optional[Callable] = None
    bounds: tuple = ()
    chart: Optional[Callable] = None  # x -> theta, the inverse of the parameterisation

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def sample(self, rng, n):
        if self.parameterization is None:
            raise NoParameterization("invariant set has no parameterisation")
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        theta = lo + (hi - lo) * rng.random((n, self.dim))
        return apply_rows(self.parameterization, theta)


@dataclass
class ProjectionResult:
    zeta_bar: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    distance: float


class InvariantProjector:
    """Nearest point of psi(E): 32^d grid multistart, then bounded Levenberg-Marquardt.

    The grid images are computed once.  Ties between grid points go to the
    lowest grid index; the returned point is never farther than the best grid
    point.
    """

    def __init__(self, gm: GluingMap, inv_set: InvariantSetSpec, grid_per_dim=32):
        if inv_set is None or inv_set.parameterization is None:
            raise NoParameterization("projection needs a parameterised invariant set")
        self.gm = gm
        self.inv_set = inv_set
        self.lo = np.array([b[0] for b in inv_set.bounds], dtype=float)
        self.hi = np.array([b[1] for b in inv_set.bounds], dtype=float)
        axes = [np.linspace(a, b, grid_per_dim) for a, b in inv_set.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.theta_grid = np.stack([m.ravel() for m in mesh], axis=-1)
        self.x_grid = apply_rows(inv_set.parameterization, self.theta_grid)
        self.z_grid = gm.image(self.x_grid)
        self.cell = (self.hi - self.lo) / max(grid_per_dim - 1, 1)

    def _x(self, theta):
        return np.asarray(self.inv_set.parameterization(theta), dtype=float)

    def _refine(self, theta0, zeta_hat, max_iter=100):
        """Bounded Levenberg-Marquardt on |psi(x(theta)) - zeta_hat|^2."""
        span = self.hi - self.lo
        th = np.clip(np.asarray(theta0, dtype=float), self.lo, self.hi)
        r = self.gm(self._x(th)) - zeta_hat
        cost = float(r @ r)
        lam = 1e-3
        for _ in range(max_iter):
            jac = np.empty((r.size, th.size))
            for j in range(th.size):
                hj = 1e-7 * max(1.0, abs(th[j]))
                e = th.copy()
                e[j] = e[j] + hj if e[j] + hj <= self.hi[j] else e[j] - hj
                jac[:, j] = (self.gm(self._x(e)) - zeta_hat - r) / (e[j] - th[j])
            grad = jac.T @ r
            # parameters pinned at a bound with the gradient pointing outward stay fixed
            free = ~(((th <= self.lo) & (grad > 0)) | ((th >= self.hi) & (grad < 0)))
            if not np.any(free):
                break
            hess = (jac.T @ jac)[np.ix_(free, free)]
            accepted = False
            while lam < 1e12:
                step = np.zeros_like(th)
                step[free] = np.linalg.solve(hess + lam * np.diag(np.diag(hess) + 1e-12), -grad[free])
                th_new = np.clip(th + step, self.lo, self.hi)
                if np.max(np.abs(th_new - th) / span) <= 1e-13:
                    break
                r_new = self.gm(self._x(th_new)) - zeta_hat
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    accepted = True
                    break
                lam *= 4.0
            if not accepted:
                break
            moved = np.max(np.abs(th_new - th) / span)
            gain = cost - cost_new
            th, r, cost = th_new, r_new, cost_new
            lam = max(lam / 3.0, 1e-12)
            if moved <= 1e-11 or gain <= 1e-12 * cost + 1e-30:
                break
        return th, cost

    def _on_bound(self, theta):
        tol = 1e-12 * (self.hi - self.lo)
        return bool(np.any(theta <= self.lo + tol) or np.any(theta >= self.hi - tol))

    def _chart_start(self, zeta_hat):
        if self.inv_set.chart is None or self.gm.psi_inv is None:
            return None
        try:
            theta = np.asarray(self.inv_set.chart(self.gm.inverse(zeta_hat)), dtype=float)
        except (ValueError, ZeroDivisionError, FloatingPointError):
            return None
        return np.clip(theta, self.lo, self.hi) if np.all(np.isfinite(theta)) else None

    def project(self, zeta_hat, warm_start=None) -> ProjectionResult:
        """Nearest point of psi(E) to ``zeta_hat``.

        With a warm start the local solve runs first.  Further starts are
        tried when the warm result is not clearly best: the best grid point,
        and the chart of psi^-1(zeta_hat) when the set provides a chart.  This
        matters at the seam, where the preimage jumps to the opposite edge of
        the parameter box.
        """
        zeta_hat = np.asarray(zeta_hat, dtype=float)
        d2 = np.sum((self.z_grid - zeta_hat) ** 2, axis=1)
        i0 = int(np.argmin(d2))
        grid_theta, grid_cost = self.theta_grid[i0], float(d2[i0])
        best_theta, best_cost = grid_theta, grid_cost
        if warm_start is None:
            chart = self._chart_start(zeta_hat)
            starts = [grid_theta] + ([] if chart is None else [chart])
        else:
            theta, cost = self._refine(warm_start, zeta_hat)
            if cost < best_cost:
                best_theta, best_cost = theta, cost
            starts = []
            if cost > grid_cost or np.any(np.abs(grid_theta - theta) > 2.0 * self.cell):
                starts.append(grid_theta)
            if self._on_bound(theta):
                chart = self._chart_start(zeta_hat)
                if chart is not None and np.any(np.abs(chart - theta) > 2.0 * self.cell):
                    starts.append(chart)
        for theta0 in starts:
            theta, cost = self._refine(theta0, zeta_hat)
            if cost < best_cost:
                best_theta, best_cost = theta, cost
        return self._result(best_theta, best_cost)

    def _result(self, theta, cost):
        x = self._x(theta)
        return ProjectionResult(self.gm(x), x, np.asarray(theta), float(np.sqrt(cost)))


@dataclass
class GluedSystem:
    """Continuous-time system zeta' = f_psi(zeta[, u]), y = h_psi(zeta)."""

    f_psi: Callable
    gm: GluingMap
    sys: HybridSystem
    invariant_set: Optional[InvariantSetSpec] = None
    h_psi: Optional[Callable] = None
    domain_tol: float = 1e-6

    @property
    def m(self) -> int:
        return self.gm.m

    def f(self, zeta, u=None):
        if u is None:
            u = np.zeros(self.sys.p)
        return np.asarray(self.f_psi(np.asarray(zeta, dtype=float), u), dtype=float)

    def h(self, zeta):
        if self.h_psi is None:
            raise NoOutputMap("glued system has no output map")
        return np.atleast_1d(np.asarray(self.h_psi(np.asarray(zeta, dtype=float)), dtype=float))

    def domain_test(self, zeta) -> bool:
        zeta = np.asarray(zeta, dtype=float)
        try:
            x = self.gm.inverse(zeta)
        except (NotInGluedDomain, ValueError, ZeroDivisionError):
            return False
        if not np.all(np.isfinite(x)):
            return False
        gap = np.linalg.norm(self.gm(x) - zeta)
        return bool(gap <= self.domain_tol * max(1.0, np.linalg.norm(zeta)) and self.sys.in_flow_set(x))

    @cached_property
    def projector(self) -> InvariantProjector:
        return InvariantProjector(self.gm, self.invariant_set)


def composed_flow(sys: HybridSystem, gm: GluingMap):
    """f_psi(zeta, u) = d_psi(psi^-1(zeta)) f(psi^-1(zeta), u)."""

    def f_psi(zeta, u):
        x = gm.inverse(zeta)
        return gm.jacobian(x) @ sys.f(x, u)

    return f_psi


def composed_output(sys: HybridSystem, gm: GluingMap):
    def h_psi(zeta):
        return sys.h(gm.inverse(zeta))

    return h_psi


# --- checks ------------------------------------------------------------------


def _g2_pairs(rng, n_points, n_pairs):
    i = rng.integers(0, n_points, size=n_pairs)
    j = rng.integers(0, n_points, size=n_pairs)
    keep = i != j
    return i[keep], j[keep]


def check_gluing_axioms(sys: HybridSystem, gm: GluingMap, c_samples, d_samples, *,
                        n_pairs=10_000, rng=None, escape_sequences=None) -> dict:
    """Sampled checks of the five gluing axioms.

    G5 (properness) has no finite certificate; its entry is an escape probe
    and never affects certification.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    c_samples = np.atleast_2d(np.asarray(c_samples, dtype=float))
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))
    if c_samples.size == 0 or d_samples.size == 0:
        raise SamplerEmpty("need samples in both C and D")
    out = {}

    psi_d = gm.image(d_samples)
    psi_gd = gm.image(np.array([sys.g(x) for x in d_samples]))
    out["G1"] = _worst(np.linalg.norm(psi_d - psi_gd, axis=1), d_samples, 1e-9)

    off_d = np.array([x for x in c_samples if not sys.in_jump_set(x)])
    if off_d.size == 0:
        raise SamplerEmpty("no samples in C minus D")
    z = gm.image(off_d)
    i, j = _g2_pairs(rng, len(off_d), n_pairs)
    _, nn = cKDTree(z).query(z, k=2)
    i = np.concatenate([i, np.arange(len(off_d))])
    j = np.concatenate([j, nn[:, 1]])
    dz = np.linalg.norm(z[i] - z[j], axis=1)
    dx = np.linalg.norm(off_d[i] - off_d[j], axis=1)
    collide = dz <= 1e-9
    violation = np.where(collide, dx, 0.0)
    ratio = dz / np.maximum(dx, 1e-300)
    out["G2"] = CheckResult(
        bool(np.all(violation <= 1e-6)),
        float(violation.max()),
        [off_d[i[int(np.argmin(ratio))]].tolist(), off_d[j[int(np.argmin(ratio))]].tolist()],
        note=f"{len(i)} pairs; min |dpsi|/|dx| = {float(ratio.min()):.3e}",
    )
    if gm.psi_inv is not None:
        back = apply_rows(gm.psi_inv, z, sys.n)
        out["G2_roundtrip"] = _worst(np.linalg.norm(back - off_d, axis=1), off_d, 1e-8)

    if gm.d_psi is not None:
        rel = []
        for x in c_samples:
            ja = gm.jacobian(x)
            jf = jacobian_fd(gm.psi, x, FD_STEP, method="central")
            rel.append(float(np.max(np.abs(ja - jf)) / max(1.0, float(np.max(np.abs(ja))))))
        out["G3"] = _worst(rel, c_samples, 1e-4)
    else:
        out["G3"] = CheckResult(True, 0.0, None, note="no analytic Jacobian; finite differences in use")

    margins = []
    for x in c_samples:
        jac = gm.jacobian(x)
        if sys.manifold_dim < sys.n:
            jac = jac @ null_space(sys.d_r_C(x))
        s = np.linalg.svd(jac, compute_uv=False)
        margins.append(float(s.min()) if s.size >= sys.manifold_dim else 0.0)
    out["G4"] = _worst(margins, c_samples, 1e-8, larger_is_better=True)

    out["G5"] = _escape_probe(gm, escape_sequences)
    return out


def _escape_probe(gm, sequences):
    if not sequences:
        return CheckResult(True, float("nan"), None, note="report-only; no escape sequences supplied")
    growth = []
    for seq in sequences:
        norms = np.linalg.norm(gm.image(seq), axis=1)
        growth.append(float(norms[-1] / max(norms[0], 1e-12)))
    worst = int(np.argmin(growth))
    return CheckResult(bool(growth[worst] > 10.0), growth[worst], np.asarray(sequences[worst][-1]).tolist(),
                       note="report-only escape-to-infinity probe (non-certifying)")


def check_vector_field_matching(sys: HybridSystem, gm: GluingMap, d_samples, inputs=None,
                                tol=1e-8) -> CheckResult:
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))
    us = _input_grid(inputs, sys.p)
    vals, pts = [], []
    for x in d_samples:
        gx = sys.g(x)
        jx, jg = gm.jacobian(x), gm.jacobian(gx)
        for u in us:
            vals.append(float(np.linalg.norm(jx @ sys.f(x, u) - jg @ sys.f(gx, u))))
            pts.append(x)
    return _worst(vals, pts, tol)


def check_output_matching(sys: HybridSystem, d_samples, tol=1e-9) -> CheckResult:
    if sys.output_map is None:
        raise NoOutputMap(f"{sys.name} has no output map")
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))
    vals = [float(np.linalg.norm(sys.h(x) - sys.h(sys.g(x)))) for x in d_samples]
    return _worst(vals, d_samples, tol)


def build_glued_system(sys: HybridSystem, gm: GluingMap, inv_set: Optional[InvariantSetSpec],
                       d_samples, *, inputs=None, f_psi=None, h_psi=None) -> GluedSystem:
    """Glue ``sys`` by ``gm`` after confirming the matching conditions on D.

    Closed-form ``f_psi``/``h_psi`` replace the generic compositions when given.
    """
    match = check_vector_field_matching(sys, gm, d_samples, inputs)
    if not match.passed:
        raise MatchingViolation(
            f"vector fields do not match on D (residual {match.worst_residual:.3e} at {match.worst_point})")
    if sys.output_map is not None:
        out = check_output_matching(sys, d_samples)
        if not out.passed:
            raise MatchingViolation(f"output matching fails (residual {out.worst_residual:.3e})")
    return GluedSystem(
        f_psi=f_psi or composed_flow(sys, gm),
        gm=gm,
        sys=sys,
        invariant_set=inv_set,
        h_psi=h_psi or (composed_output(sys, gm) if sys.output_map is not None else None),
    )


@dataclass(frozen=True)
class GluedTrajectory:
    t: np.ndarray
    zeta: np.ndarray

    def iter_rows(self):
        for t, z in zip(self.t, self.zeta):
            yield float(t), 0, "flow", z


def simulate_glued(gs: GluedSystem, zeta0, t_end, step=1e-3, input=None,
                   check_domain=True) -> GluedTrajectory:
    """Plain RK4 on the glued ODE; no events are needed."""
    zeta = np.asarray(zeta0, dtype=float).copy()
    if input is None:
        zero = np.zeros(gs.sys.p)
        field_ = lambda t, z: gs.f(z, zero)  # noqa: E731
    else:
        field_ = lambda t, z: gs.f(z, np.atleast_1d(input(t, z)))  # noqa: E731
    n_steps = int(np.ceil(t_end / step - 1e-9))
    ts = np.empty(n_steps + 1)
    zs = np.empty((n_steps + 1, zeta.size))
    ts[0], zs[0] = 0.0, zeta
    t = 0.0
    for k in range(1, n_steps + 1):
        h = min(step, t_end - t)
        zeta = rk4_step(field_, t, zeta, h)
        t = k * step if k < n_steps else t_end
        if check_domain and not gs.domain_test(zeta):
            raise LeftGluedDomain(f"glued state left C^psi at t={t}: {zeta}")
        ts[k], zs[k] = t, zeta
    return GluedTrajectory(ts, zs)


def project_to_invariant(gs: GluedSystem, zeta_hat, warm_start=None) -> ProjectionResult:
    if gs.invariant_set is None or gs.invariant_set.parameterization is None:
        raise NoParameterization("glued system has no parameterised invariant set")
    return gs.projector.project(zeta_hat, warm_start)


def unglue(gm: GluingMap, zeta, sys: Optional[HybridSystem] = None, tol=1e-8):
    """psi^-1 restricted to C minus D; the seam maps to its G-side preimage."""
    zeta = np.asarray(zeta, dtype=float)
    try:
        x = gm.inverse(zeta)
    except (ValueError, ZeroDivisionError) as exc:
        raise NotInGluedDomain(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise NotInGluedDomain(f"{zeta} is outside the glued domain")
    if np.linalg.norm(gm(x) - zeta) > tol * max(1.0, np.linalg.norm(zeta)):
        raise NotInGluedDomain(f"{zeta} is not in psi(C)")
    if sys is not None and (sys.in_jump_set(x) or not sys.in_flow_set(x)):
        raise NotInGluedDomain(f"preimage {x} of {zeta} is not in C minus D")
    return x


def report_to_dict(report: dict) -> dict:
    return {k: v.to_dict() for k, v in report.items()}
