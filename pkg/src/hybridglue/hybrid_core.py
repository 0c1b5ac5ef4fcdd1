"""Hybrid systems with state jumps and their event-localised simulation.

A hybrid system flows by ``x' = f(x, u)`` on a flow set C and jumps by
``x+ = g(x)`` on a jump set D.  D and its image G = g(D) are described by a
smooth level function (``r_D``, ``r_G``) together with a membership predicate,
since in several models both sets live on the same level set and differ only
by a sign condition (the bouncing ball's floor).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._numerics import gradient_fd, jacobian_fd, next_breakpoint, rk4_step
from .errors import (
    EmptySampleSet,
    EscapedFlowSet,
    MaxJumpsExceeded,
    NonTransversalEvent,
    NotApplicable,
    OutOfHorizon,
)

TRANSVERSALITY_MARGIN = 1e-8


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one sampled check: pass flag plus worst residual and where."""

    passed: bool
    worst_residual: float
    worst_point: Optional[list] = None
    note: str = ""

    def to_dict(self):
        out = {
            "pass": bool(self.passed),
            "worst_residual": float(self.worst_residual),
            "worst_point": self.worst_point,
        }
        if self.note:
            out["note"] = self.note
        return out


def _worst(residuals, points, tol, *, larger_is_better=False, note=""):
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size == 0:
        raise EmptySampleSet("no samples to check")
    idx = int(np.argmin(residuals) if larger_is_better else np.argmax(residuals))
    value = float(residuals[idx])
    passed = value > tol if larger_is_better else value <= tol
    point = np.asarray(points[idx], dtype=float).tolist()
    return CheckResult(bool(passed), value, point, note)


@dataclass(frozen=True)
class HybridSystem:
    """The tuple (C, f, D, g[, h]) with guard functions.

    ``flow_map(x, u)`` and ``jump_map(x)`` act on single states.  Membership
    predicates take a numerical tolerance into account so that states
    localised on a guard (to within the event tolerance) still count.
    """

    n: int
    flow_map: Callable
    jump_map: Callable
    r_D: Callable
    r_G: Callable
    in_flow_set: Callable
    in_jump_set: Callable
    in_jump_image: Callable
    k: Optional[int] = None
    p: int = 0
    q: int = 0
    output_map: Optional[Callable] = None
    r_C: Optional[Callable] = None
    drift: Optional[Callable] = None
    input_matrix: Optional[Callable] = None
    grad_r_D: Optional[Callable] = None
    grad_r_G: Optional[Callable] = None
    jac_r_C: Optional[Callable] = None
    name: str = "hybrid"

    @property
    def manifold_dim(self) -> int:
        return self.n if self.k is None else self.k

    def f(self, x, u=None):
        if u is None:
            u = np.zeros(self.p)
        return np.asarray(self.flow_map(np.asarray(x, dtype=float), u), dtype=float)

    def g(self, x):
        return np.asarray(self.jump_map(np.asarray(x, dtype=float)), dtype=float)

    def h(self, x):
        if self.output_map is None:
            raise ValueError(f"{self.name} has no output map")
        return np.atleast_1d(np.asarray(self.output_map(np.asarray(x, dtype=float)), dtype=float))

    def grad_guard(self, which, x):
        x = np.asarray(x, dtype=float)
        if which == "D":
            return self.grad_r_D(x) if self.grad_r_D else gradient_fd(self.r_D, x)
        if which == "G":
            return self.grad_r_G(x) if self.grad_r_G else gradient_fd(self.r_G, x)
        raise ValueError(f"unknown boundary {which!r}; use 'D' or 'G'")

    def d_r_C(self, x):
        if self.r_C is None:
            raise NotApplicable("k = n: no constraint map r_C")
        if self.jac_r_C is not None:
            return np.atleast_2d(self.jac_r_C(np.asarray(x, dtype=float)))
        return jacobian_fd(self.r_C, x)


@dataclass(frozen=True)
class SimParams:
    t_end: float
    step: float = 1e-3
    event_tol: float = 1e-10
    max_jumps: int = 10_000

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.event_tol < self.step:
            raise ValueError("event_tol must be smaller than step")
        if self.max_jumps < 1:
            raise ValueError("max_jumps must be at least 1")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")


@dataclass(frozen=True)
class HybridTimeTrajectory:
    intervals: tuple

    def __post_init__(self):
        prev_end = None
        for a, b in self.intervals:
            if a > b:
                raise ValueError("interval start after end")
            if prev_end is not None and a != prev_end:
                raise ValueError("intervals must be contiguous")
            prev_end = b

    @property
    def N(self) -> int:
        return len(self.intervals) - 1

    @property
    def length(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    @property
    def jump_times(self) -> np.ndarray:
        """tau_1 .. tau_N (the starts of every interval after the first)."""
        return np.array([a for a, _ in self.intervals[1:]], dtype=float)


@dataclass(frozen=True)
class Arc:
    t: np.ndarray
    x: np.ndarray


@dataclass(frozen=True, eq=False)
class HybridExecution:
    time_traj: HybridTimeTrajectory
    arcs: tuple
    jump_pairs: tuple
    field: Optional[Callable] = field(default=None, repr=False)

    @property
    def jump_times(self) -> np.ndarray:
        return self.time_traj.jump_times

    @property
    def t_end(self) -> float:
        return self.time_traj.intervals[-1][1]

    @property
    def x0(self) -> np.ndarray:
        return self.arcs[0].x[0]

    def _locate(self, t):
        if t < 0 or t > self.t_end:
            raise OutOfHorizon(f"t={t} outside [0, {self.t_end}]")
        starts = self.__dict__.get("_starts")
        if starts is None:
            starts = np.array([a for a, _ in self.time_traj.intervals])
            object.__setattr__(self, "_starts", starts)
        i = int(np.searchsorted(starts, t, side="right") - 1)
        return max(i, 0)

    def state_at(self, t, dense=False):
        """Right-continuous state x(t).

        Linear interpolation between stored samples by default; with
        ``dense=True`` the flow is re-integrated from the preceding sample,
        which keeps fourth-order accuracy between grid points.
        """
        t = float(t)
        i = self._locate(t)
        arc = self.arcs[i]
        if arc.t.size == 1:
            return arc.x[0].copy()
        j = int(np.searchsorted(arc.t, t, side="right") - 1)
        j = min(max(j, 0), arc.t.size - 2)
        dt = t - arc.t[j]
        if dt == 0.0:
            return arc.x[j].copy()
        if dense and self.field is not None:
            return rk4_step(self.field, arc.t[j], arc.x[j], dt)
        w = dt / (arc.t[j + 1] - arc.t[j])
        return (1.0 - w) * arc.x[j] + w * arc.x[j + 1]

    def sample(self, t_grid, dense=False):
        return np.array([self.state_at(t, dense=dense) for t in t_grid])

    def iter_rows(self):
        """Yield ``(t, interval_index, event, x)`` rows in time order."""
        last = len(self.arcs) - 1
        for i, arc in enumerate(self.arcs):
            for j, (t, x) in enumerate(zip(arc.t, arc.x)):
                if j == arc.t.size - 1 and i < last:
                    event = "pre"
                elif j == 0 and i > 0:
                    event = "post"
                else:
                    event = "flow"
                yield float(t), i, event, x


def _closed_loop_field(sys: HybridSystem, input_fn):
    if input_fn is None:
        zero = np.zeros(sys.p)
        return lambda t, x: sys.f(x, zero)

    def field_(t, x):
        return sys.f(x, np.atleast_1d(np.asarray(input_fn(t, x), dtype=float)))

    return field_


def simulate_hybrid(sys: HybridSystem, x0, params: SimParams, input=None, breakpoints=None) -> HybridExecution:
    """Simulate an execution with fixed-step RK4 and bisection-localised jumps.

    A jump fires when a step carries ``r_D`` from non-positive to positive
    and the localised point belongs to D.  The stored pre-jump state is the
    first bisection point with ``r_D > 0``; for systems where D and G share a
    level set this keeps the post-jump state on the flow side.

    ``breakpoints`` lists times where the input is discontinuous; steps are
    shortened to land on them.
    """
    x = np.asarray(x0, dtype=float).copy()
    field_ = _closed_loop_field(sys, input)
    bps = np.sort(np.asarray(breakpoints if breakpoints is not None else [], dtype=float))
    h_nom = params.step
    t = 0.0
    intervals, arcs, jumps = [], [], []
    start = 0.0
    ts, xs = [0.0], [x.copy()]

    def do_jump(t_ev, x_ev):
        nonlocal start, ts, xs, x
        intervals.append((start, t_ev))
        arcs.append(Arc(np.array(ts), np.array(xs)))
        if len(jumps) >= params.max_jumps:
            raise MaxJumpsExceeded(f"more than {params.max_jumps} jumps before t={t_ev}")
        x_post = sys.g(x_ev)
        jumps.append((x_ev.copy(), x_post.copy()))
        start = t_ev
        x = x_post
        ts, xs = [t_ev], [x_post.copy()]

    if sys.in_jump_set(x):
        do_jump(0.0, x.copy())

    while params.t_end - t > 1e-12:
        h = min(h_nom, params.t_end - t)
        bp = next_breakpoint(bps, t)
        at_bp = bp - t <= h
        if at_bp:
            h = bp - t
        x_new = rk4_step(field_, t, x, h, left_end=at_bp)
        if sys.r_D(x_new) > 0.0 and sys.r_D(x) <= 0.0:
            lo, hi = 0.0, h
            while hi - lo > params.event_tol:
                mid = 0.5 * (lo + hi)
                if sys.r_D(rk4_step(field_, t, x, mid, left_end=at_bp and mid >= h)) > 0.0:
                    hi = mid
                else:
                    lo = mid
            x_ev = rk4_step(field_, t, x, hi, left_end=at_bp and hi >= h)
            t_ev = bp if (at_bp and hi >= h) else t + hi
            if not sys.in_jump_set(x_ev):
                raise EscapedFlowSet(f"guard crossed outside the jump set at t={t_ev}, x={x_ev}")
            margin = float(np.dot(sys.grad_guard("D", x_ev), field_(t_ev, x_ev)))
            if margin <= TRANSVERSALITY_MARGIN:
                raise NonTransversalEvent(f"grad r_D . f = {margin:.3e} at t={t_ev}")
            ts.append(t_ev)
            xs.append(x_ev.copy())
            do_jump(t_ev, x_ev)
            t = t_ev
            continue
        if not sys.in_flow_set(x_new):
            raise EscapedFlowSet(f"left the flow set at t={t + h}, x={x_new}")
        t = bp if at_bp else t + h
        x = x_new
        ts.append(t)
        xs.append(x.copy())

    intervals.append((start, t))
    arcs.append(Arc(np.array(ts), np.array(xs)))
    return HybridExecution(HybridTimeTrajectory(tuple(intervals)), tuple(arcs), tuple(jumps), field_)


def state_at(execution: HybridExecution, t, dense=False):
    return execution.state_at(t, dense=dense)


def _input_grid(input_samples, p):
    if input_samples is None or p == 0:
        return np.zeros((1, p))
    return np.atleast_2d(np.asarray(input_samples, dtype=float)).reshape(-1, p)


def check_transversality(sys: HybridSystem, boundary, samples, input_samples=None, mu=0.0,
                         on_boundary_tol=1e-9) -> CheckResult:
    """Minimum of grad r . f over boundary samples; passes iff it exceeds ``mu``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise EmptySampleSet("no boundary samples")
    level = sys.r_D if boundary == "D" else sys.r_G
    off = max(abs(float(level(x))) for x in samples)
    if off > on_boundary_tol:
        raise ValueError(f"samples are not on {boundary} (|r| up to {off:.2e})")
    inputs = _input_grid(input_samples, sys.p)
    vals, pts = [], []
    for x in samples:
        grad = sys.grad_guard(boundary, x)
        for u in inputs:
            vals.append(float(np.dot(grad, sys.f(x, u))))
            pts.append(x)
    return _worst(vals, pts, mu, larger_is_better=True)


def verify_flow_tangency(sys: HybridSystem, samples, input_samples=None, tol=1e-7) -> CheckResult:
    if sys.r_C is None or sys.manifold_dim == sys.n:
        raise NotApplicable("flow tangency only applies when C has dimension k < n")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    inputs = _input_grid(input_samples, sys.p)
    vals, pts = [], []
    for x in samples:
        dr = sys.d_r_C(x)
        for u in inputs:
            vals.append(float(np.linalg.norm(dr @ sys.f(x, u))))
            pts.append(x)
    return _worst(vals, pts, tol)


def check_standing_assumptions(sys: HybridSystem, c_samples, d_samples, input_samples=None) -> dict:
    """Sampled checks of the structural assumptions on (C, f, D, g).

    Returns a mapping from check name to :class:`CheckResult`.
    """
    c_samples = np.atleast_2d(np.asarray(c_samples, dtype=float))
    d_samples = np.atleast_2d(np.asarray(d_samples, dtype=float))
    out = {}
    if sys.r_C is not None and sys.manifold_dim < sys.n:
        out["A1_level"] = _worst([np.linalg.norm(np.atleast_1d(sys.r_C(x))) for x in c_samples],
                                 c_samples, 1e-9)
        ratios = []
        for x in c_samples:
            s = np.linalg.svd(sys.d_r_C(x), compute_uv=False)
            rank = int(np.sum(s > 1e-8 * s[0])) if s[0] > 0 else 0
            ratios.append(float(rank))
        out["A1_rank"] = _worst(ratios, c_samples, sys.n - sys.manifold_dim - 0.5,
                                larger_is_better=True)
        out["A2_tangency"] = verify_flow_tangency(sys, c_samples, input_samples)
    out["A3_on_guard"] = _worst([abs(float(sys.r_D(x))) for x in d_samples], d_samples, 1e-9)
    images = np.array([sys.g(x) for x in d_samples])
    out["A4_image_on_guard"] = _worst([abs(float(sys.r_G(y))) for y in images], d_samples, 1e-9)
    out["A4_image_in_C"] = _worst([0.0 if sys.in_flow_set(y) else 1.0 for y in images],
                                  d_samples, 0.0)
    overlap = [1.0 if sys.in_jump_image(x) else 0.0 for x in d_samples]
    overlap += [1.0 if sys.in_jump_set(y) else 0.0 for y in images]
    out["A4_D_disjoint_G"] = _worst(overlap, np.vstack([d_samples, images]), 0.0)
    return out


def all_passed(report: dict) -> bool:
    return all(r.passed for r in report.values())
