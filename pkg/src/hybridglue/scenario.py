"""Scenario runner: config in, CSV trajectories and JSON reports out.

A scenario names a bundle, a mode and a handful of numbers.  The config is
validated completely before anything is written, so a bad config leaves no
partial output behind.  Given the same config and seed every CSV and report
is byte-identical; only the manifest carries the wall time.
"""

from __future__ import annotations

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .analysis import (
    RegionSampler,
    dwell_violations,
    estimate_bilipschitz,
    estimate_dwell_function,
    estimate_glued_lipschitz,
    seam_quotient,
)
from .errors import ConfigError, HybridGlueError, ModelNotFound, PipelineError
from .gluing import check_gluing_axioms, check_output_matching, check_vector_field_matching
from .hybrid_core import SimParams, check_standing_assumptions, check_transversality, simulate_hybrid
from .io import sha256_file, write_csv, write_execution_csv, write_json
from .models import REGISTRY, ExampleBundle, get_model
from .observer import (
    estimation_error_report,
    graphical_closeness,
    reconstruct_estimate,
    run_ekf_observer,
    run_output_injection_observer,
)
from .tracking import (
    build_matched_glued_control_system,
    check_reference,
    check_relaxed_matching,
    glued_error_continuity,
    largest_converging_radius,
    make_reference,
    simulate_closed_loop,
    simulate_glued_closed_loop,
    tracking_controller,
    tracking_error_report,
)

SCHEMA_VERSION = "1.0"
MODES = ("estimate", "track", "certify", "analyze")
TOP_KEYS = {"model_id", "mode", "params", "sim", "scenario", "analysis", "checks", "seed", "output_dir", "sweep"}
SECTION_KEYS = {
    "sim": {"t_end", "step", "event_tol", "max_jumps"},
    "scenario": {"x0", "r0", "eps", "eps_star", "zeta_hat0", "observer", "search_window", "reconstruct_stride",
                 "probe_radius"},
    "analysis": {"n_pairs", "n_samples", "n_trajectories", "n_holdout", "t_traj", "eps_grid", "margin"},
    "checks": {"tracking_tol", "pushforward_tol"},
}
EKF_NOTE = "an extended Kalman filter on the glued system stands in for a Lipschitz-observer gain design"


@dataclass
class RunArtifacts:
    out_dir: Path
    manifest: dict
    files: dict
    checks: dict
    exit_code: int
    children: list = field(default_factory=list)


# --- config handling -------------------------------------------------------------

def load_config(source) -> dict:
    if isinstance(source, dict):
        return copy.deepcopy(source)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return data


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars or lists)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse override value {raw!r}") from exc
        else:
            key, value = item
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return cfg


def _as_float_list(value, name, length=None):
    try:
        arr = [float(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of numbers") from exc
    if length is not None and len(arr) != length:
        raise ConfigError(f"{name} must have {length} entries, got {len(arr)}")
    return arr


def validate_config(cfg: dict, registry=None) -> dict:
    """Check keys and types and resolve the bundle; returns the normalised config."""
    reg = REGISTRY if registry is None else registry
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    if "model_id" not in cfg:
        raise ConfigError("config is missing model_id")
    if cfg.get("mode") not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {cfg.get('mode')!r}")
    if cfg["model_id"] not in reg:
        raise ModelNotFound(f"unknown model {cfg['model_id']!r}; known: {', '.join(sorted(reg))}")
    for section, keys in SECTION_KEYS.items():
        sub = cfg.get(section, {}) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = set(sub) - keys
        if bad:
            raise ConfigError(f"unknown keys in {section}: {', '.join(sorted(bad))}")
        cfg[section] = dict(sub)
    params = cfg.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigError("params must be a mapping")
    bad = set(params) - set(reg[cfg["model_id"]].schema)
    if bad:
        raise ConfigError(f"unknown parameters for {cfg['model_id']}: {', '.join(sorted(bad))}")
    cfg["params"] = dict(params)
    seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg["seed"] = seed
    sim = cfg["sim"]
    for key in ("t_end", "step", "event_tol"):
        if key in sim:
            try:
                sim[key] = float(sim[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sim.{key} must be a number") from exc
    sc = cfg["scenario"]
    for key in ("eps", "eps_star", "search_window", "probe_radius"):
        if key in sc:
            try:
                sc[key] = float(sc[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"scenario.{key} must be a number") from exc
            if not sc[key] > 0:
                raise ConfigError(f"scenario.{key} must be positive")
    if "observer" in sc and sc["observer"] not in ("output_injection", "ekf"):
        raise ConfigError("scenario.observer must be output_injection or ekf")
    sweep = cfg.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, list) or not all(isinstance(e, dict) for e in sweep):
            raise ConfigError("sweep must be a list of mappings of dotted overrides")
    return cfg


def _build_bundle(cfg, registry=None) -> ExampleBundle:
    try:
        return get_model(cfg["model_id"], registry=registry, **cfg["params"])
    except ModelNotFound:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid parameters for {cfg['model_id']}: {exc}") from exc


def check_capability(cfg, bundle: ExampleBundle):
    """Mode-specific requirements that depend on the resolved bundle."""
    mode, sc = cfg["mode"], cfg["scenario"]
    if mode == "estimate":
        if bundle.glued is None or bundle.inv_set is None:
            raise ConfigError(f"{bundle.name} has no glued observer setup")
        kind = sc.get("observer", "output_injection" if bundle.observer is not None else "ekf")
        if kind == "output_injection" and bundle.observer is None:
            raise ConfigError(f"{bundle.name} has no output-injection observer; use observer: ekf")
        if kind == "ekf" and bundle.ekf is None:
            raise ConfigError(f"{bundle.name} has no EKF settings")
        if sc.get("zeta_hat0") is not None:
            _as_float_list(sc["zeta_hat0"], "scenario.zeta_hat0", bundle.gm.m)
    if mode == "track":
        if bundle.tracking is None:
            raise ConfigError(f"mode track needs a bundle with a tracking setup; {bundle.name} has none")
        if "r0" in sc:
            _as_float_list(sc["r0"], "scenario.r0", bundle.sys.n)
    if "x0" in sc:
        _as_float_list(sc["x0"], "scenario.x0", bundle.sys.n)
    _sim_params(cfg, bundle)


def _sim_params(cfg, bundle) -> SimParams:
    sim = cfg["sim"]
    try:
        return SimParams(
            t_end=float(sim.get("t_end", bundle.defaults.get("t_end", 10.0))),
            step=float(sim.get("step", bundle.defaults.get("step", 1e-3))),
            event_tol=float(sim.get("event_tol", 1e-10)),
            max_jumps=int(sim.get("max_jumps", 10_000)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid sim parameters: {exc}") from exc


# --- shared helpers ---------------------------------------------------------------

def _dwell_ensemble(bundle, params: SimParams, rng, n, t_traj=None):
    """Executions started from random points of E (used for dwell estimates)."""
    if bundle.inv_set is None:
        return []
    sp_ = SimParams(t_end=t_traj or params.t_end, step=params.step, event_tol=params.event_tol)
    return [simulate_hybrid(bundle.sys, x0, sp_) for x0 in bundle.inv_set.sample(rng, n)]


def _default_eps_grid(extra=()):
    grid = np.geomspace(1e-3, 0.5, 20)
    return np.unique(np.concatenate([grid, np.asarray(extra, dtype=float)]))


def _region_sampler(bundle, margin):
    """E with the margin-neighbourhood of D removed, for inverse Lipschitz estimates."""
    inv, dist_D, in_E = bundle.inv_set, bundle.dist_D, bundle.in_E

    def contains(x):
        x = np.atleast_2d(x)
        return in_E(x) & (dist_D(x) >= margin)

    def sample(rng, n):
        out, have = [], 0
        for _ in range(100):
            pts = inv.sample(rng, max(2 * n, 64))
            pts = pts[contains(pts)]
            out.append(pts)
            have += len(pts)
            if have >= n:
                break
        pts = np.vstack(out)
        return pts[:n]

    return RegionSampler(sample, contains)


def _checks_from(report: dict, skip=()) -> dict:
    return {k: bool(v.passed) for k, v in report.items() if k not in skip}


# --- pipelines --------------------------------------------------------------------

def _pipeline_estimate(cfg, bundle, out: Path, rng):
    sc, params = cfg["scenario"], _sim_params(cfg, bundle)
    kind = sc.get("observer", "output_injection" if bundle.observer is not None else "ekf")
    x0 = _as_float_list(sc.get("x0", bundle.defaults["x0"]), "scenario.x0", bundle.sys.n)
    eps = float(sc.get("eps", bundle.defaults.get("eps", 0.05)))
    eps_star = float(sc.get("eps_star", bundle.defaults.get("eps_star", 0.1)))
    stride = int(sc.get("reconstruct_stride", 1))
    notes = []

    execution = simulate_hybrid(bundle.sys, x0, params)
    y = lambda t: bundle.sys.h(execution.state_at(t, dense=True))  # noqa: E731
    z0 = sc.get("zeta_hat0", bundle.defaults.get("zeta_hat0"))
    if z0 is None:
        z0 = bundle.glued.projector.project(np.zeros(bundle.gm.m)).zeta_bar
        notes.append("observer initialised at the projection of the origin onto psi(E)")
    z0 = np.asarray(_as_float_list(z0, "scenario.zeta_hat0", bundle.gm.m))
    # the measured output has kinks at the plant's jumps; the integrator steps onto them
    kinks = execution.jump_times
    if kind == "output_injection":
        run = run_output_injection_observer(bundle.observer, y, z0, params.t_end, params.step, kinks)
    else:
        e = bundle.ekf
        run = run_ekf_observer(bundle.glued, y, z0, np.array(e["Q"]), np.array(e["R"]), params.t_end,
                               params.step, np.array(e["P0"]), kinks)
        notes.append(EKF_NOTE)
    idx = np.arange(0, run.t.size, stride)
    if idx[-1] != run.t.size - 1:
        idx = np.append(idx, run.t.size - 1)
    t = run.t[idx]
    x_hat, zeta_bar = reconstruct_estimate(bundle.glued, run.zeta_hat[idx])
    x = execution.sample(t, dense=True)
    err = np.linalg.norm(x - x_hat, axis=1)
    e_glued = np.linalg.norm(bundle.gm.image(x) - run.zeta_hat[idx], axis=1)

    an = cfg["analysis"]
    ens = _dwell_ensemble(bundle, params, rng, int(an.get("n_trajectories", 10)), an.get("t_traj"))
    dwell = estimate_dwell_function(ens + [execution], _default_eps_grid([eps, eps_star]),
                                    bundle.dist_D, bundle.dist_G)
    report = estimation_error_report(t, x, x_hat, execution.jump_times, dwell, eps)
    window = float(sc.get("search_window", max(2 * dwell(eps_star), 0.05)))
    closeness = graphical_closeness(t, x, x_hat, eps_star, window, alpha=dwell)
    in_E = bool(np.all(bundle.in_E(x_hat)))

    n, m = bundle.sys.n, bundle.gm.m
    header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"zeta_hat_{i + 1}" for i in range(m)]
              + [f"zeta_bar_{i + 1}" for i in range(m)] + [f"x_hat_{i + 1}" for i in range(n)]
              + ["e_glued", "err"])
    rows = ([t[k], *x[k], *run.zeta_hat[idx[k]], *zeta_bar[k], *x_hat[k], e_glued[k], err[k]]
            for k in range(t.size))
    files = {
        "trajectory.csv": write_execution_csv(out / "trajectory.csv", execution),
        "observer.csv": write_csv(out / "observer.csv", header, rows),
    }
    payload = {
        "model_id": bundle.name, "observer": kind, "x0": x0, "zeta_hat0": z0, "jump_times": execution.jump_times,
        "error_report": report, "alpha_hat": dwell.rows(),
        "closeness": {"eps_star": eps_star, "search_window": window, "pass": closeness.passed,
                      "T_star": closeness.T_star, "worst_t": closeness.worst_t, "worst_gap": closeness.worst_gap},
        "x_hat_in_E": in_E, "hurwitz": run.hurwitz, "notes": notes + run.notes,
    }
    files["report.json"] = write_json(out / "report.json", payload)
    checks = {"windowed_convergence": report.passed, "graphical_closeness": closeness.passed, "x_hat_in_E": in_E}
    if run.hurwitz is not None:
        checks["observer_hurwitz"] = bool(run.hurwitz)
    return files, checks, notes


def _pipeline_track(cfg, bundle, out: Path, rng):
    tr = bundle.tracking
    sc, params = cfg["scenario"], _sim_params(cfg, bundle)
    x0 = _as_float_list(sc.get("x0", bundle.defaults["x0"]), "scenario.x0", bundle.sys.n)
    r0 = _as_float_list(sc.get("r0", bundle.defaults["r0"]), "scenario.r0", bundle.sys.n)
    eps = float(sc.get("eps", bundle.defaults.get("eps", 0.1)))
    tol = float(cfg["checks"].get("tracking_tol", 1e-2))
    push_tol = float(cfg["checks"].get("pushforward_tol", 1e-5))

    # the reference is stored a little past the horizon so that a reference jump
    # at the final time still gets its window
    ref_params = SimParams(params.t_end + 1.0, params.step, params.event_tol, params.max_jumps)
    ref = make_reference(bundle.sys, r0, tr["u_r"], ref_params, tr["R_set"])
    ref_checks = check_reference(bundle.sys, ref, ref_params)
    u_c = tracking_controller(bundle.feedback, bundle.gm, tr["law"])
    run = simulate_closed_loop(bundle.sys, u_c, ref, x0, params, bundle.gm)
    d = bundle.sampler.jump(rng, 200)
    mgs = build_matched_glued_control_system(bundle.sys, bundle.gm, bundle.feedback, d)
    glued = simulate_glued_closed_loop(mgs, tr["law"], ref, bundle.gm(x0), params.t_end, params.step)
    push_gap = float(np.max(np.linalg.norm(
        bundle.gm.image(run.execution.sample(glued.t, dense=True)) - glued.zeta, axis=1)))

    dwell = estimate_dwell_function([ref.execution, run.execution], _default_eps_grid([eps]),
                                    bundle.dist_D, bundle.dist_G)
    report = tracking_error_report(run, dwell, eps)
    mf = bundle.feedback
    speeds = []
    for k in range(run.t.size):
        v = np.linalg.solve(mf.gamma_mat(run.x[k]), run.u[k] - mf.kappa_vec(run.x[k]))
        v_r = np.linalg.solve(mf.gamma_mat(run.r[k]), run.u_r[k] - mf.kappa_vec(run.r[k]))
        speeds.append(np.linalg.norm(mgs.f(run.zeta[k], v)) + np.linalg.norm(mgs.f(run.zeta_r[k], v_r)))
    bound = 1.5 * float(np.max(speeds))
    continuity = glued_error_continuity(run, bound)
    tail = run.t >= 0.25 * run.t[-1]
    positive = tail & (run.glued_err > 0)
    rate = float(-np.polyfit(run.t[positive], np.log(run.glued_err[positive]), 1)[0])
    final_err = float(run.glued_err[-1])

    # transversality can only be sampled over the inputs the run actually applied
    u_all = np.concatenate([run.u.ravel(), run.u_r.ravel()])
    u_range = [float(u_all.min()), float(u_all.max())]
    u_grid = np.linspace(*u_range, 9).reshape(-1, bundle.sys.p)
    transversal = check_transversality(bundle.sys, "D", d, u_grid)
    radius = None
    if "probe_radius" in sc:
        direction = run.zeta[0] - run.zeta_r[0]
        if not np.any(direction):
            direction = np.ones_like(direction)
        radius = largest_converging_radius(bundle.sys, u_c, ref, bundle.gm, params, direction,
                                           r_max=sc["probe_radius"], tol=tol)

    files = {
        "tracking.csv": write_csv(out / "tracking.csv", run.header(), run.iter_rows()),
        "reference.csv": write_execution_csv(out / "reference.csv", ref.execution),
        "plant.csv": write_execution_csv(out / "plant.csv", run.execution),
    }
    payload = {
        "model_id": bundle.name, "x0": x0, "r0": r0,
        "reference_jump_times": ref.r_jump_times, "plant_jump_times": run.execution.jump_times,
        "reference_checks": ref_checks, "final_glued_err": final_err, "tracking_tol": tol,
        "decay_rate_fit": rate, "closed_loop_eigenvalues": tr["eigenvalues"],
        "error_report": report, "alpha_hat": dwell.rows(), "glued_continuity": continuity,
        "pushforward_gap": push_gap, "seam_residual": mgs.seam_residual,
        "input_range": u_range, "transversality_over_inputs": transversal,
        "largest_converging_radius": radius,
    }
    files["report.json"] = write_json(out / "report.json", payload)
    checks = {f"reference_{k}": v for k, v in _checks_from(ref_checks).items()}
    checks.update({"final_glued_err": final_err < tol, "windowed_tracking": report.passed,
                   "glued_continuity": continuity.passed, "pushforward": push_gap <= push_tol,
                   "transversal_over_inputs": transversal.passed})
    return files, checks, []


def _certify_report(cfg, bundle, rng):
    an = cfg["analysis"]
    n = int(an.get("n_samples", 1000))
    c, d = bundle.sampler.flow(rng, n), bundle.sampler.jump(rng, n)
    u = bundle.sampler.inputs(rng, 5) if bundle.sampler.inputs is not None else None
    rep = dict(check_standing_assumptions(bundle.sys, c, d, u))
    rep["A4_transversal_D"] = check_transversality(bundle.sys, "D", d, u)
    rep["A4_transversal_G"] = check_transversality(bundle.sys, "G", np.array([bundle.sys.g(x) for x in d]), u)
    esc = bundle.sampler.escape(rng) if bundle.sampler.escape is not None else None
    rep.update(check_gluing_axioms(bundle.sys, bundle.gm, c, d, n_pairs=int(an.get("n_pairs", 10_000)),
                                   rng=rng, escape_sequences=esc))
    if bundle.feedback is not None:
        rep.update({f"relaxed_{k}": v for k, v in check_relaxed_matching(bundle.sys, bundle.gm,
                                                                         bundle.feedback, d).items()})
    else:
        rep["vector_field_matching"] = check_vector_field_matching(bundle.sys, bundle.gm, d, u)
        if bundle.sys.output_map is not None:
            rep["output_matching"] = check_output_matching(bundle.sys, d)
    return rep, d


def _lipschitz_section(cfg, bundle, rng, d):
    an = cfg["analysis"]
    out = {}
    if bundle.inv_set is None:
        return out, {}
    margin = float(an.get("margin", 0.1))
    n_pairs = int(an.get("n_pairs", 10_000))
    est = estimate_bilipschitz(bundle.gm, _region_sampler(bundle, margin), n_pairs, rng)
    out["bilipschitz"] = est
    out["bilipschitz_margin"] = margin
    out["seam_negative_control"] = seam_quotient(bundle.gm, bundle.sys, d[:50])
    if bundle.glued is not None:
        out["glued_lipschitz"] = estimate_glued_lipschitz(bundle.glued, n_pairs, rng)
    return out, {"bilipschitz_finite": bool(np.isfinite(est.constant))}


def _pipeline_certify(cfg, bundle, out: Path, rng):
    rep, d = _certify_report(cfg, bundle, rng)
    lip, lip_checks = _lipschitz_section(cfg, bundle, rng, d)
    payload = {"model_id": bundle.name, "checks": rep, "lipschitz": lip,
               "report_only": ["G5"]}
    files = {"certify.json": write_json(out / "certify.json", payload)}
    checks = _checks_from(rep, skip=("G5",))
    checks.update(lip_checks)
    return files, checks, ["Lipschitz constants are sampled estimates, not certificates"]


def _pipeline_analyze(cfg, bundle, out: Path, rng):
    an, params = cfg["analysis"], _sim_params(cfg, bundle)
    files, checks, payload = {}, {}, {"model_id": bundle.name}
    if bundle.inv_set is not None and bundle.dist_D is not None:
        eps_grid = np.asarray(an.get("eps_grid", _default_eps_grid()), dtype=float)
        ens = _dwell_ensemble(bundle, params, rng, int(an.get("n_trajectories", 20)), an.get("t_traj"))
        dwell = estimate_dwell_function(ens, eps_grid, bundle.dist_D, bundle.dist_G)
        held = _dwell_ensemble(bundle, params, rng, int(an.get("n_holdout", 10)), an.get("t_traj"))
        violations = dwell_violations(held, dwell, bundle.dist_D, bundle.dist_G)
        files["dwell.csv"] = write_csv(out / "dwell.csv", ["eps", "alpha_hat"], dwell.rows())
        payload["dwell"] = {"violations_held_out": violations, "n_trajectories": len(ens), "n_holdout": len(held)}
        checks["dwell_monotone"] = bool(np.all(np.diff(dwell.alpha_values) >= 0))
        checks["dwell_held_out"] = violations == 0
    d = bundle.sampler.jump(rng, 200)
    lip, lip_checks = _lipschitz_section(cfg, bundle, rng, d)
    payload["lipschitz"] = lip
    checks.update(lip_checks)
    files["analysis.json"] = write_json(out / "analysis.json", payload)
    return files, checks, ["dwell function and Lipschitz constants are sampled estimates"]


PIPELINES = {
    "estimate": _pipeline_estimate,
    "track": _pipeline_track,
    "certify": _pipeline_certify,
    "analyze": _pipeline_analyze,
}


# --- entry point ----------------------------------------------------------------

def _manifest(cfg, files, checks, notes, wall, exit_code, error=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": "hybridglue",
        "version": __version__,
        "config": cfg,
        "wall_time_s": wall,
        "substitution_notes": sorted(set(notes)),
        "files": {name: {"path": Path(p).name, "sha256": sha256_file(p)} for name, p in sorted(files.items())},
        "checks": checks,
        "exit_code": exit_code,
        "error": error,
    }


def _run_single(cfg, out: Path, registry=None, plots=False) -> RunArtifacts:
    bundle = _build_bundle(cfg, registry)
    check_capability(cfg, bundle)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    start = time.perf_counter()
    error = None
    try:
        files, checks, notes = PIPELINES[cfg["mode"]](cfg, bundle, out, rng)
    except (HybridGlueError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        files, checks, notes = {}, {"pipeline": False}, []
    if plots and error is None:
        from .plotting import render

        for p in render(cfg["mode"], out):
            files[Path(p).name] = p
    exit_code = 0 if all(checks.values()) else 1
    manifest = _manifest(cfg, files, checks, notes, time.perf_counter() - start, exit_code, error)
    write_json(out / "manifest.json", manifest)
    if error is not None:
        raise PipelineError(f"{cfg['model_id']}/{cfg['mode']} failed: {error}")
    return RunArtifacts(out, manifest, files, checks, exit_code)


def run_scenario(config, out_dir=None, seed: Optional[int] = None, overrides=(), jobs=1, plots=False,
                 registry=None) -> RunArtifacts:
    """Run one scenario (or a sweep of them) and write its artifacts.

    Raises ConfigError or ModelNotFound before writing anything when the
    config is invalid.  ``exit_code`` is 0 when every configured check
    passes and 1 otherwise.
    """
    cfg = apply_overrides(load_config(config), overrides)
    if seed is not None:
        cfg["seed"] = seed
    cfg = validate_config(cfg, registry)
    out = Path(out_dir if out_dir is not None else cfg.get("output_dir", "out"))
    cfg["output_dir"] = str(out)
    sweep = cfg.pop("sweep", None)
    if not sweep:
        return _run_single(cfg, out, registry, plots)

    entries = []
    for i, entry in enumerate(sweep):
        sub = validate_config(apply_overrides(cfg, list(entry.items())), registry)
        sub["output_dir"] = str(out / f"sweep_{i:03d}")
        check_capability(sub, _build_bundle(sub, registry))
        entries.append(sub)
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        futures = [pool.submit(_run_single, sub, Path(sub["output_dir"]), registry, plots) for sub in entries]
        children = [f.result() for f in futures]
    checks = {f"sweep_{i:03d}": c.exit_code == 0 for i, c in enumerate(children)}
    files = {f"sweep_{i:03d}/manifest.json": c.out_dir / "manifest.json" for i, c in enumerate(children)}
    exit_code = 0 if all(checks.values()) else 1
    manifest = _manifest({**cfg, "sweep": sweep}, {}, checks, [], 0.0, exit_code)
    manifest["files"] = {k: {"path": str(Path(p).relative_to(out)), "sha256": sha256_file(p)}
                         for k, p in sorted(files.items())}
    write_json(out / "manifest.json", manifest)
    return RunArtifacts(out, manifest, files, checks, exit_code, children)
