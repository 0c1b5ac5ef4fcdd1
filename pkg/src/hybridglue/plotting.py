"""Optional figure rendering from the emitted CSV files.

matplotlib is imported only here and only when figures are requested, so the
rest of the package does not depend on it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _load(path):
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name] = np.array([float(r[j]) for r in rows])
        except ValueError:
            cols[name] = np.array([r[j] for r in rows])
    return cols


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("figures need matplotlib; install the 'plots' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _columns(cols, prefix):
    return [k for k in cols if k.startswith(prefix) and k[len(prefix):].isdigit()]


def plot_estimation(out_dir) -> list:
    out_dir = Path(out_dir)
    plt = _pyplot()
    obs = _load(out_dir / "observer.csv")
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for name in _columns(obs, "x_"):
        axes[0].plot(obs["t"], obs[name], lw=1.2, label=name)
        hat = "x_hat_" + name[2:]
        if hat in obs:
            axes[0].plot(obs["t"], obs[hat], "--", lw=1.0, label=hat)
    axes[0].set_ylabel("state")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].semilogy(obs["t"], np.maximum(obs["err"], 1e-16), lw=1.0)
    axes[1].set_ylabel("|x - x_hat|")
    axes[1].set_xlabel("t")
    fig.tight_layout()
    path = out_dir / "estimation.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def plot_tracking(out_dir) -> list:
    out_dir = Path(out_dir)
    plt = _pyplot()
    run = _load(out_dir / "tracking.csv")
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(run["t"], run["x_1"], label="x_1")
    axes[0].plot(run["t"], run["r_1"], "--", label="r_1")
    axes[0].legend(fontsize=8)
    axes[1].plot(run["t"], run["zeta_1"], label="zeta_1")
    axes[1].plot(run["t"], run["zeta_r_1"], "--", label="zeta_r_1")
    axes[1].legend(fontsize=8)
    axes[2].semilogy(run["t"], np.maximum(run["glued_err"], 1e-16))
    axes[2].set_ylabel("|zeta - zeta_r|")
    axes[2].set_xlabel("t")
    fig.tight_layout()
    path = out_dir / "tracking.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def plot_dwell(out_dir) -> list:
    out_dir = Path(out_dir)
    plt = _pyplot()
    dw = _load(out_dir / "dwell.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(dw["eps"], dw["alpha_hat"], where="post")
    ax.set_xlabel("eps")
    ax.set_ylabel("alpha_hat(eps)")
    fig.tight_layout()
    path = out_dir / "dwell.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


RENDERERS = {"estimate": plot_estimation, "track": plot_tracking, "analyze": plot_dwell}


def render(mode, out_dir) -> list:
    fn = RENDERERS.get(mode)
    return [] if fn is None else fn(out_dir)
