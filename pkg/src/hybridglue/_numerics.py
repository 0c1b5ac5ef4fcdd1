"""Small numerical helpers shared by the simulation and checking modules."""

from __future__ import annotations

import numpy as np


def rk4_step(field, t, x, h, left_end=False):
    """One classical Runge-Kutta step of ``x' = field(t, x)``.

    With ``left_end`` the last stage is evaluated just below ``t + h``, so a
    piecewise input that switches exactly at the step end is seen from the left.
    """
    k1 = field(t, x)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    t4 = np.nextafter(t + h, -np.inf) if left_end else t + h
    k4 = field(t4, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_span(field, t0, t1, x, breakpoints=None):
    """RK4 from ``t0`` to ``t1``, split at any breakpoints strictly inside.

    Used where a forcing signal is continuous but has kinks at known times.
    """
    if breakpoints is None or len(breakpoints) == 0:
        return rk4_step(field, t0, x, t1 - t0)
    i, j = np.searchsorted(breakpoints, [t0, t1], side="right")
    cuts = [b for b in breakpoints[i:j] if t0 < b < t1]
    t = t0
    for b in cuts + [t1]:
        x = rk4_step(field, t, x, b - t)
        t = b
    return x


def jacobian_fd(fun, x, step=1e-6, method="central"):
    """Finite-difference Jacobian of ``fun`` at ``x`` (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        hj = step * max(1.0, abs(x[j]))
        e[j] = hj
        if method == "forward":
            jac[:, j] = (np.atleast_1d(fun(x + e)) - f0) / hj
        else:
            jac[:, j] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * hj)
    return jac


def gradient_fd(fun, x, step=1e-6):
    return jacobian_fd(lambda z: np.atleast_1d(fun(z)), x, step)[0]


def apply_rows(fun, points, out_dim=None):
    """Evaluate ``fun`` on each row of ``points``, trying a batched call first.

    Model callables in this package broadcast over a leading axis, but user
    callables need not, so a shape mismatch falls back to a Python loop.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    try:
        out = np.asarray(fun(points), dtype=float)
        if out.ndim == 2 and out.shape[0] == points.shape[0]:
            if out_dim is None or out.shape[1] == out_dim:
                return out
        if out.ndim == 1 and out.shape[0] == points.shape[0] and out_dim in (None, 1):
            return out[:, None]
    except Exception:  # noqa: BLE001 - non-vectorised callables raise arbitrary errors
        pass
    return np.array([np.atleast_1d(fun(p)) for p in points], dtype=float)


def null_space(mat, rtol=1e-10):
    mat = np.atleast_2d(mat)
    _, s, vt = np.linalg.svd(mat)
    rank = int(np.sum(s > rtol * (s[0] if s.size else 1.0)))
    return vt[rank:].T


def next_breakpoint(breakpoints, t, tol=0.0):
    """First entry of the sorted array ``breakpoints`` strictly after ``t + tol``."""
    if breakpoints is None or len(breakpoints) == 0:
        return np.inf
    i = int(np.searchsorted(breakpoints, t + tol, side="right"))
    return float(breakpoints[i]) if i < len(breakpoints) else np.inf
