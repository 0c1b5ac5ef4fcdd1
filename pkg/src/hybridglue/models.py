"""Ready-made example bundles: bouncing ball, ripple cone and reflected double integrator.

Each bundle carries the hybrid system, a gluing map with analytic Jacobian
and closed-form inverse, an invariant set where one is meaningful, scenario
defaults, and samplers used by the checkers.  Bundles validate themselves
when constructed and refuse to exist if any check fails.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .errors import BadEnergyBand, HybridGlueError, ModelNotFound, NotHurwitz
from .gluing import (
    GluedSystem,
    GluingMap,
    InvariantSetSpec,
    check_gluing_axioms,
    check_output_matching,
    check_vector_field_matching,
)
from .hybrid_core import CheckResult, HybridSystem, check_standing_assumptions, check_transversality
from .observer import OutputInjectionObserver, SymbolicModel
from .tracking import MatchingFeedback, check_relaxed_matching, linear_tracking_law

MEMBERSHIP_TOL = 1e-8
SQRT3 = np.sqrt(3.0)


class BundleInvalid(HybridGlueError):
    """A bundle failed one of its construction-time checks."""


@dataclass(frozen=True)
class BundleSampler:
    """Random points on C, on D, along escape rays, and admissible inputs."""

    flow: Callable
    jump: Callable
    escape: Optional[Callable] = None
    inputs: Optional[Callable] = None


@dataclass
class ExampleBundle:
    name: str
    sys: HybridSystem
    gm: GluingMap
    sampler: BundleSampler
    params: dict
    defaults: dict
    inv_set: Optional[InvariantSetSpec] = None
    glued: Optional[GluedSystem] = None
    observer: Optional[OutputInjectionObserver] = None
    ekf: Optional[dict] = None
    dist_D: Optional[Callable] = None
    dist_G: Optional[Callable] = None
    in_E: Optional[Callable] = None
    symbolic: Optional[SymbolicModel] = None
    immersion: Optional[tuple] = None
    feedback: Optional[MatchingFeedback] = None
    tracking: Optional[dict] = None
    validation: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _segment_distance(points, direction, lo, hi, origin=None):
    """Distance from rows of ``points`` to {origin + s * direction : lo <= s <= hi}."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.asarray(direction, dtype=float)
    base = np.zeros_like(d) if origin is None else np.asarray(origin, dtype=float)
    s = np.clip((p - base) @ d, lo, hi)
    return np.linalg.norm(p - base - s[:, None] * d[None, :], axis=1)


def _validate(bundle: ExampleBundle, rng_seed=12345, n=300, n_pairs=2000):
    """Sampled construction-time checks; raises BundleInvalid on any failure."""
    rng = np.random.default_rng(rng_seed)
    sys, gm, s = bundle.sys, bundle.gm, bundle.sampler
    c, d = s.flow(rng, n), s.jump(rng, n)
    u = s.inputs(rng, 5) if s.inputs is not None else None
    report = dict(check_standing_assumptions(sys, c, d, u))
    boundary_g = np.array([sys.g(x) for x in d])
    report["A4_transversal_D"] = check_transversality(sys, "D", d, u)
    report["A4_transversal_G"] = check_transversality(sys, "G", boundary_g, u)
    axioms = check_gluing_axioms(sys, gm, c, d, n_pairs=n_pairs, rng=rng)
    report.update({k: v for k, v in axioms.items() if k != "G5"})
    if bundle.feedback is not None:
        report.update({f"relaxed_{k}": v for k, v in check_relaxed_matching(sys, gm, bundle.feedback, d).items()})
    else:
        report["vector_field_matching"] = check_vector_field_matching(sys, gm, d, u)
        report["output_matching"] = check_output_matching(sys, d)
    if bundle.glued is not None:
        z = gm.image(c[: min(n, 200)])
        gap = max(float(np.linalg.norm(bundle.glued.f(zz) - gm.jacobian(x) @ sys.f(x))) for zz, x in zip(z, c))
        report["override_f_psi"] = _check(gap, 1e-8)
        inv_gap = max(float(np.linalg.norm(gm.inverse(zz) - x)) for zz, x in zip(z, c))
        report["override_psi_inv"] = _check(inv_gap, 1e-8)
    failed = [k for k, v in report.items() if not v.passed]
    if failed:
        raise BundleInvalid(f"{bundle.name}: construction checks failed: {', '.join(failed)}")
    bundle.validation = report
    return bundle


def _check(residual, tol):
    return CheckResult(bool(residual <= tol), float(residual))


# --- bouncing ball -------------------------------------------------------------

def bouncing_ball(rho=1.0, mass=1.0, delta_lo=1.0, delta_hi=50.0, poles=(-2.0, -3.0, -4.0),
                  validate=True) -> ExampleBundle:
    """Ball on a floor with restitution one, position measured.

    The gluing map stacks y^2 and its derivatives so the glued dynamics are
    linear up to the injection term -6 rho sqrt(zeta_1).
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not mass > 0:
        raise ValueError("mass must be positive")
    if not 0 < delta_lo < delta_hi:
        raise BadEnergyBand(f"need 0 < delta_lo < delta_hi, got {delta_lo}, {delta_hi}")
    tol = MEMBERSHIP_TOL

    def flow_map(x, u):
        return np.array([x[1], -rho])

    def in_C(x):
        return bool(x[0] >= -tol and np.hypot(x[0], x[1]) > 0)

    def in_D(x):
        return bool(abs(x[0]) <= tol and x[1] < 0)

    def in_G(x):
        return bool(abs(x[0]) <= tol and x[1] > 0)

    sys = HybridSystem(
        n=2, flow_map=flow_map, jump_map=lambda x: -x, r_D=lambda x: -x[0], r_G=lambda x: x[0],
        in_flow_set=in_C, in_jump_set=in_D, in_jump_image=in_G, q=1, output_map=lambda x: x[:1],
        grad_r_D=lambda x: np.array([-1.0, 0.0]), grad_r_G=lambda x: np.array([1.0, 0.0]),
        name="bouncing_ball",
    )

    def psi(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x1 ** 2, 2 * x1 * x2, 2 * x2 ** 2 + 4 * rho * x1], axis=-1)

    def d_psi(x):
        x1, x2 = x
        return np.array([[2 * x1, 0.0], [2 * x2, 2 * x1], [4 * rho, 4 * x2]])

    def psi_inv(z):
        z = np.asarray(z, dtype=float)
        x1 = np.sqrt(max(z[0], 0.0))
        sign = -1.0 if z[1] < 0 else 1.0
        x2 = sign * np.sqrt(max((z[2] - 4 * rho * x1) / 2.0, 0.0))
        return np.array([x1, x2])

    gm = GluingMap(m=3, psi=psi, psi_inv=psi_inv, d_psi=d_psi, name="bouncing_ball_psi")

    def energy(x):
        x = np.asarray(x, dtype=float)
        return mass * rho * x[..., 0] + 0.5 * mass * x[..., 1] ** 2

    def in_E_rows(x):
        x = np.atleast_2d(x)
        e = energy(x)
        band = 1e-9 * delta_hi
        return (x[:, 0] >= -tol) & (e >= delta_lo - band) & (e <= delta_hi + band)

    def in_E(x):
        return bool(in_E_rows(x)[0])

    def param(theta):
        e, s = theta
        return np.array([e * (1 - s * s) / (mass * rho), s * np.sqrt(max(2 * e / mass, 0.0))])

    def chart(x):
        e = float(energy(x))
        return np.array([e, x[1] / np.sqrt(2 * e / mass) if e > 0 else 0.0])

    inv_set = InvariantSetSpec(in_E, param, ((delta_lo, delta_hi), (-1.0, 1.0)), chart)

    def f_psi(z, u=None):
        return np.array([z[1], z[2] - 6 * rho * np.sqrt(max(z[0], 0.0)), 0.0])

    glued = GluedSystem(f_psi, gm, sys, inv_set, h_psi=lambda z: np.array([np.sqrt(max(z[0], 0.0))]))

    v_lo, v_hi = np.sqrt(2 * delta_lo / mass), np.sqrt(2 * delta_hi / mass)

    def dist_D(x):
        return _segment_distance(x, (0.0, -1.0), v_lo, v_hi)

    def dist_G(x):
        return _segment_distance(x, (0.0, 1.0), v_lo, v_hi)

    def flow_samples(rng, n):
        n_e, n_g = n // 2, n // 10
        n_b = n - n_e - n_g
        box = np.column_stack([rng.uniform(0, 10, n_b), rng.uniform(-10, 10, n_b)])
        g_pts = np.column_stack([np.zeros(n_g), rng.uniform(0.1, 10, n_g)])
        return np.vstack([inv_set.sample(rng, n_e), box, g_pts])

    def jump_samples(rng, n):
        return np.column_stack([np.zeros(n), -rng.uniform(0.1, 10, n)])

    def escape(rng):
        angles = rng.uniform(-np.pi / 2 + 0.05, np.pi / 2, 8)
        radii = 10.0 ** np.arange(0, 7)
        return [np.outer(radii, [np.cos(a), np.sin(a)]) for a in angles]

    x_sym1 = sp.Symbol("x1", nonnegative=True)
    x_sym2 = sp.Symbol("x2", real=True)
    symbolic = SymbolicModel((x_sym1, x_sym2), (x_sym2, -sp.nsimplify(rho)), x_sym1)
    immersion = (lambda y: y ** 2, (0, lambda ys: -6 * sp.nsimplify(rho) * sp.sqrt(ys), 0))

    observer = OutputInjectionObserver.canonical(
        3, poles, a=lambda ys: np.array([0.0, -6 * rho * np.sqrt(max(ys, 0.0)), 0.0]), phi=lambda y: y ** 2)

    bundle = ExampleBundle(
        name="bouncing_ball", sys=sys, gm=gm,
        sampler=BundleSampler(flow_samples, jump_samples, escape),
        params={"rho": rho, "mass": mass, "delta_lo": delta_lo, "delta_hi": delta_hi, "poles": list(poles)},
        defaults={"x0": [2.0, -3.0], "t_end": 10.0, "step": 1e-3, "eps": 0.05, "eps_star": 0.1,
                  "zeta_hat0": None},
        inv_set=inv_set, glued=glued, observer=observer, dist_D=dist_D, dist_G=dist_G, in_E=in_E_rows,
        symbolic=symbolic, immersion=immersion,
    )
    return _validate(bundle) if validate else bundle


# --- ripple cone ---------------------------------------------------------------

def ripple_model(validate=True) -> ExampleBundle:
    """Harmonic oscillator on a 120 degree cone, reflected across the x1 axis at the lower edge.

    Tripling the polar angle glues the two edges of the cone, and the glued
    flow is a rotation at angular speed 3.
    """
    tol = MEMBERSHIP_TOL
    h1, h2 = np.array([SQRT3, 1.0]), np.array([SQRT3, -1.0])
    J = np.diag([1.0, -1.0])

    def in_C(x):
        return bool(np.hypot(x[0], x[1]) > 0 and h1 @ x >= -tol and h2 @ x >= -tol)

    def in_D(x):
        return bool(abs(h1 @ x) <= tol and h2 @ x > 0)

    def in_G(x):
        return bool(abs(h2 @ x) <= tol and h1 @ x > 0)

    sys = HybridSystem(
        n=2, flow_map=lambda x, u: np.array([x[1], -x[0]]), jump_map=lambda x: J @ x,
        r_D=lambda x: -float(h1 @ x), r_G=lambda x: float(h2 @ x),
        in_flow_set=in_C, in_jump_set=in_D, in_jump_image=in_G, q=1, output_map=lambda x: x[:1],
        grad_r_D=lambda x: -h1, grad_r_G=lambda x: h2, name="ripple",
    )

    def psi(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        r2 = x1 ** 2 + x2 ** 2
        return np.stack([4 * x1 ** 3 / r2 - 3 * x1, -4 * x2 ** 3 / r2 + 3 * x2], axis=-1)

    def d_psi(x):
        x1, x2 = x
        r2 = x1 ** 2 + x2 ** 2
        r4 = r2 * r2
        return np.array([
            [12 * x1 ** 2 / r2 - 8 * x1 ** 4 / r4 - 3, -8 * x1 ** 3 * x2 / r4],
            [8 * x2 ** 3 * x1 / r4, -12 * x2 ** 2 / r2 + 8 * x2 ** 4 / r4 + 3],
        ])

    def _angle(z):
        phi = np.arctan2(z[1], z[0])
        # the seam angle -pi is sent to +pi, i.e. to the G edge of the cone
        return phi + 2 * np.pi if phi <= -np.pi + 1e-12 else phi

    def psi_inv(z):
        z = np.asarray(z, dtype=float)
        radius = np.hypot(z[0], z[1])
        if radius == 0:
            raise ValueError("the origin is not in the glued domain")
        a = _angle(z) / 3.0
        return radius * np.array([np.cos(a), np.sin(a)])

    gm = GluingMap(m=2, psi=psi, psi_inv=psi_inv, d_psi=d_psi, name="triple_angle")

    def in_E_rows(x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        return (r >= 1 - 1e-9) & (r <= 3 + 1e-9) & (x @ h1 >= -tol) & (x @ h2 >= -tol)

    def param(theta):
        r, a = theta
        return r * np.array([np.cos(a), np.sin(a)])

    def chart(x):
        return np.array([np.hypot(x[0], x[1]), np.arctan2(x[1], x[0])])

    inv_set = InvariantSetSpec(lambda x: bool(in_E_rows(x)[0]), param, ((1.0, 3.0), (-np.pi / 3, np.pi / 3)),
                               chart)

    def h_psi(z):
        radius = np.hypot(z[0], z[1])
        if radius == 0:
            return np.array([0.0])
        root = np.power(complex(z[0], abs(z[1])) / radius, 1.0 / 3.0)
        return np.array([radius * root.real])

    glued = GluedSystem(lambda z, u=None: np.array([3 * z[1], -3 * z[0]]), gm, sys, inv_set, h_psi=h_psi)

    dir_D = np.array([0.5, -SQRT3 / 2])
    dir_G = np.array([0.5, SQRT3 / 2])

    def polar(rng, n, r_lo, r_hi):
        r = rng.uniform(r_lo, r_hi, n)
        a = rng.uniform(-np.pi / 3, np.pi / 3, n)
        return np.column_stack([r * np.cos(a), r * np.sin(a)])

    def flow_samples(rng, n):
        n_g = n // 10
        return np.vstack([polar(rng, n - n_g, 0.2, 5.0), np.outer(rng.uniform(0.2, 5.0, n_g), dir_G)])

    def jump_samples(rng, n):
        return np.outer(rng.uniform(0.2, 5.0, n), dir_D)

    def escape(rng):
        angles = rng.uniform(-np.pi / 3 + 0.05, np.pi / 3, 8)
        radii = 10.0 ** np.arange(0, 7)
        return [np.outer(radii, [np.cos(a), np.sin(a)]) for a in angles]

    bundle = ExampleBundle(
        name="ripple", sys=sys, gm=gm, sampler=BundleSampler(flow_samples, jump_samples, escape),
        params={}, defaults={"x0": [2.0, 0.0], "t_end": 10.0, "step": 1e-3, "eps": 0.1, "eps_star": 0.1,
                             "zeta_hat0": [1.5, 0.5]},
        inv_set=inv_set, glued=glued,
        ekf={"Q": (1e-6 * np.eye(2)).tolist(), "R": [[1e-4]], "P0": np.eye(2).tolist()},
        dist_D=lambda x: _segment_distance(x, dir_D, 1.0, 3.0),
        dist_G=lambda x: _segment_distance(x, dir_G, 1.0, 3.0), in_E=in_E_rows,
    )
    return _validate(bundle) if validate else bundle


# --- reflected double integrator ----------------------------------------------

@dataclass(frozen=True)
class PiecewiseConstantInput:
    """Periodic piecewise-constant signal: ``values[k]`` on [edges[k], edges[k+1]) mod ``period``."""

    values: tuple
    edges: tuple
    period: float

    def __call__(self, t):
        k = bisect.bisect_right(self.edges, float(t) % self.period) - 1
        return np.array([self.values[k]])

    def breakpoints(self, t_end):
        cycles = int(np.ceil(t_end / self.period)) + 1
        pts = [c * self.period + e for c in range(cycles) for e in self.edges]
        return np.array(sorted(p for p in pts if 0 < p <= t_end))


DEFAULT_UR = {"values": [-3.0, -2.0], "edges": [0.0, 4.0], "period": 10.0}


def reflected_double_integrator(a11=0.0, a12=1.0, a21=0.0, a22=0.0, b=1.0, K=(-0.6, -1.55),
                                u_r_spec=None, r0=(0.0, 6.0), x0=(3.0, 8.0), t_end=20.0,
                                validate=True) -> ExampleBundle:
    """Linear plant on the right half plane with a velocity-reversing wall at x1 = 0.

    A mode variable p in {-1, 1} is appended; the jump negates the augmented
    state and psi(x, p) = p x unfolds the reflections into a copy of the
    plane where both plant and reference flow without jumps.
    """
    if not a12 > 0:
        raise ValueError("a12 must be positive so that the wall is crossed transversally")
    if b == 0:
        raise ValueError("b must be non-zero")
    A = np.array([[a11, a12], [a21, a22]], dtype=float)
    B = np.array([[0.0], [b]])
    K = np.asarray(K, dtype=float).reshape(1, 2)
    eig = np.linalg.eigvals(A + B @ K)
    if np.max(eig.real) >= -1e-6:
        raise NotHurwitz(f"A + B K has eigenvalues {eig}")
    spec = dict(DEFAULT_UR if u_r_spec is None else u_r_spec)
    u_r = PiecewiseConstantInput(tuple(spec["values"]), tuple(spec["edges"]), float(spec["period"]))
    tol = MEMBERSHIP_TOL

    def drift(x):
        return np.array([a11 * x[0] + a12 * x[1], a21 * x[0] + a22 * x[1], 0.0])

    def input_matrix(x):
        return np.array([[0.0], [b], [0.0]])

    def flow_map(x, u):
        return np.array([a11 * x[0] + a12 * x[1], a21 * x[0] + a22 * x[1] + b * u[0], 0.0])

    def mode_ok(x):
        return abs(x[2] * x[2] - 1.0) <= tol

    def in_C(x):
        return bool(mode_ok(x) and x[0] >= -tol and np.hypot(x[0], x[1]) > 0)

    def in_D(x):
        return bool(mode_ok(x) and abs(x[0]) <= tol and x[1] < 0)

    def in_G(x):
        return bool(mode_ok(x) and abs(x[0]) <= tol and x[1] > 0)

    sys = HybridSystem(
        n=3, flow_map=flow_map, jump_map=lambda x: -x, r_D=lambda x: -x[0], r_G=lambda x: x[0],
        in_flow_set=in_C, in_jump_set=in_D, in_jump_image=in_G, k=2, p=1,
        r_C=lambda x: np.array([x[2] ** 2 - 1.0]), drift=drift, input_matrix=input_matrix,
        grad_r_D=lambda x: np.array([-1.0, 0.0, 0.0]), grad_r_G=lambda x: np.array([1.0, 0.0, 0.0]),
        jac_r_C=lambda x: np.array([[0.0, 0.0, 2 * x[2]]]), name="reflected_di",
    )

    def psi(x):
        x = np.asarray(x, dtype=float)
        return x[..., :2] * x[..., 2:3]

    def d_psi(x):
        x1, x2, p = x
        return np.array([[p, 0.0, x1], [0.0, p, x2]])

    def psi_inv(z):
        z = np.asarray(z, dtype=float)
        s = np.sign(z[0]) if z[0] != 0 else np.sign(z[1])
        if s == 0:
            raise ValueError("the origin is not in the glued domain")
        return s * np.array([z[0], z[1], 1.0])

    gm = GluingMap(m=2, psi=psi, psi_inv=psi_inv, d_psi=d_psi, name="mode_unfolding")
    feedback = MatchingFeedback(lambda x: np.array([[x[2]]]), lambda x: np.zeros(1))

    def with_mode(rng, pts):
        return np.column_stack([pts, rng.choice([-1.0, 1.0], len(pts))])

    def flow_samples(rng, n):
        n_g = n // 10
        box = np.column_stack([rng.uniform(0, 10, n - n_g), rng.uniform(-10, 10, n - n_g)])
        g_pts = np.column_stack([np.zeros(n_g), rng.uniform(0.1, 10, n_g)])
        return with_mode(rng, np.vstack([box, g_pts]))

    def jump_samples(rng, n):
        return with_mode(rng, np.column_stack([np.zeros(n), -rng.uniform(0.1, 10, n)]))

    def input_samples(rng, n):
        return rng.uniform(-5, 5, (n, 1))

    def escape(rng):
        out = []
        for a in rng.uniform(-np.pi / 2 + 0.05, np.pi / 2, 8):
            radii = 10.0 ** np.arange(0, 7)
            pts = np.outer(radii, [np.cos(a), np.sin(a)])
            out.append(np.column_stack([pts, np.ones(len(radii))]))
        return out

    def in_R(x):
        return bool(mode_ok(x) and -tol <= x[0] <= 10.0 and abs(x[1]) <= 7.0)

    law = linear_tracking_law(K, A=A, B=B)
    bundle = ExampleBundle(
        name="reflected_di", sys=sys, gm=gm,
        sampler=BundleSampler(flow_samples, jump_samples, escape, input_samples),
        params={"a11": a11, "a12": a12, "a21": a21, "a22": a22, "b": b, "K": K.ravel().tolist(),
                "u_r_spec": spec},
        defaults={"x0": [*x0, 1.0], "r0": [*r0, 1.0], "t_end": t_end, "step": 1e-3, "eps": 0.1},
        feedback=feedback,
        tracking={"law": law, "u_r": u_r, "R_set": in_R, "A": A, "B": B, "K": K,
                  "eigenvalues": sorted(eig.real.tolist())},
        dist_D=lambda x: _segment_distance(np.atleast_2d(x)[:, :2], (0.0, -1.0), 0.0, 7.0),
        dist_G=lambda x: _segment_distance(np.atleast_2d(x)[:, :2], (0.0, 1.0), 0.0, 7.0),
    )
    return _validate(bundle) if validate else bundle


# --- registry ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelEntry:
    factory: Callable
    schema: dict
    description: str = ""


def _default_registry():
    return {
        "bouncing_ball": ModelEntry(bouncing_ball, {"rho": 1.0, "mass": 1.0, "delta_lo": 1.0, "delta_hi": 50.0,
                                                    "poles": [-2.0, -3.0, -4.0]},
                                    "ball with unit restitution, position measured"),
        "ripple": ModelEntry(ripple_model, {}, "oscillator on a cone, triple-angle gluing"),
        "reflected_di": ModelEntry(reflected_double_integrator,
                                   {"a11": 0.0, "a12": 1.0, "a21": 0.0, "a22": 0.0, "b": 1.0,
                                    "K": [-0.6, -1.55], "u_r_spec": DEFAULT_UR, "r0": [0.0, 6.0],
                                    "x0": [3.0, 8.0], "t_end": 20.0},
                                   "double integrator with a reflecting wall, tracking"),
    }


REGISTRY: dict = _default_registry()


def register_model(name, factory, schema=None, description="", registry=None):
    (REGISTRY if registry is None else registry)[name] = ModelEntry(factory, dict(schema or {}), description)


def list_models(registry=None) -> str:
    """Deterministic listing of bundle ids with their parameter defaults."""
    reg = REGISTRY if registry is None else registry
    lines = []
    for name in sorted(reg):
        entry = reg[name]
        params = ", ".join(f"{k}={v}" for k, v in entry.schema.items()) or "(no parameters)"
        lines.append(f"{name}: {params}" + (f"  # {entry.description}" if entry.description else ""))
    return "\n".join(lines)


def get_model(name, registry=None, **overrides) -> ExampleBundle:
    reg = REGISTRY if registry is None else registry
    if name not in reg:
        raise ModelNotFound(f"unknown model {name!r}; known: {', '.join(sorted(reg))}")
    entry = reg[name]
    unknown = set(overrides) - set(entry.schema)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {', '.join(sorted(unknown))}")
    return entry.factory(**overrides)
