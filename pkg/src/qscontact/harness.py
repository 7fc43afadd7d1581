"""Run configuration, subcommand dispatch and the closure validation suite.

One YAML file drives every subcommand::

    model:
      dim: 3
      torus_length: 10.0
      kappa: critical            # or a positive number
      marks: {weights: [0.5, 0.5]}          # or {grid: {count: 8, lower: 0, upper: 1}}
      kernel: {matrix: [[2, 1], [1, 2]]}    # or {form: exponential, amplitude: 1, length: 0.25}
      mortality: [1, 1]          # optional
      dispersal: {type: gaussian, cov: 1.0}
    task:
      rho: 1.0
      seed: 0
      replicas: 100
      pair: {grid: {extent: 8.0, points_per_axis: 65}}
      ...
    output:
      directory: runs

Every run writes into a fresh subdirectory ``<directory>/<subcommand>-NNN``;
earlier runs are never touched.  Data files are byte-reproducible from
(config, seed); the wall-clock timestamp lives only in ``manifest.json``.
"""
from __future__ import annotations

import copy
import csv
import datetime
import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import dispersal as disp_mod
from . import hierarchy, marks, simulator, stationary

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "config_from_dict",
    "dispatch",
    "closure_suite",
    "SUBCOMMANDS",
    "EXIT_OK",
    "EXIT_FAILED",
    "EXIT_CONFIG",
]

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
SUBCOMMANDS = ("spectrum", "pair", "evolve", "simulate", "validate")


class ConfigError(ValueError):
    """Configuration problems, each as ``"key.path: message"``."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


# allowed keys per block; nested task blocks are checked separately
_SCHEMA = {
    "": {"model", "task", "output"},
    "model": {"dim", "torus_length", "kappa", "marks", "kernel", "mortality", "dispersal"},
    "model.marks": {"weights", "labels", "nodes", "grid"},
    "model.marks.grid": {"count", "lower", "upper"},
    "model.kernel": {"matrix", "form", "value", "amplitude", "length"},
    "model.dispersal": {"type", "cov", "mean", "radius", "path"},
    "task": {"rho", "h", "seed", "replicas", "spectrum", "pair", "evolve", "simulate",
             "validate"},
    "task.spectrum": {"tol", "max_iter", "k_counts"},
    "task.pair": {"grid", "distances", "direction", "refinements", "write_modes"},
    "task.pair.grid": {"extent", "points_per_axis"},
    "task.evolve": {"t_end", "dt", "samples", "k2", "grid", "distances"},
    "task.evolve.grid": {"extent", "points_per_axis"},
    "task.simulate": {"t_end", "samples", "pair_bins", "pair_times", "n_jobs"},
    "task.simulate.pair_bins": {"lower", "upper", "count"},
    "task.validate": {"fixed_point_t", "relax_t", "mc_replicas", "mc_t", "pair_replicas",
                      "pair_t", "pair_bins", "refinements", "evolve_times", "evolve_grid",
                      "dt", "quadrature_tol"},
    "task.validate.pair_bins": {"lower", "upper", "count"},
    "task.validate.evolve_grid": {"extent", "points_per_axis"},
    "output": {"directory", "formats"},
}


@dataclass
class RunConfig:
    """Validated configuration with the model objects already built."""

    raw: dict
    dim: int
    torus_length: float
    space: marks.MarkSpace
    kernel: marks.MarkKernel
    eigen: marks.EigenData
    dispersal: object
    kappa: float
    kappa_token: str | float
    task: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    source: str | None = None

    @property
    def rescaled(self):
        return not self.kernel.homogeneous

    @property
    def rho(self):
        return float(self.task.get("rho", 1.0))

    @property
    def h(self):
        """Initial mark density; defaults to the Perron vector q."""
        h = self.task.get("h")
        return self.eigen.q.copy() if h is None else np.asarray(h, dtype=float)

    @property
    def seed(self):
        return int(self.task.get("seed", 0))

    @property
    def replicas(self):
        return int(self.task.get("replicas", 100))

    def sub(self, name):
        return dict(self.task.get(name) or {})


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _check_keys(block, path, errs):
    allowed = _SCHEMA.get(path)
    if allowed is None or not isinstance(block, dict):
        return
    for key in block:
        if key not in allowed:
            errs.append(f"{path + '.' if path else ''}{key}: unknown key")
    for key, val in block.items():
        sub = f"{path}.{key}" if path else key
        if sub in _SCHEMA:
            if not isinstance(val, dict):
                errs.append(f"{sub}: expected a mapping")
            else:
                _check_keys(val, sub, errs)


def _num_list(val, path, errs, positive=False, nonneg=False):
    if not isinstance(val, (list, tuple)) or not val or not all(_is_num(v) for v in val):
        errs.append(f"{path}: expected a non-empty list of numbers")
        return None
    arr = np.asarray(val, dtype=float)
    if positive and np.any(arr <= 0):
        errs.append(f"{path}: entries must be strictly positive")
    if nonneg and np.any(arr < 0):
        errs.append(f"{path}: entries must be nonnegative")
    return arr


def _grid_check(block, path, errs):
    if block is None:
        return
    n = block.get("points_per_axis", 65)
    if not isinstance(n, int) or isinstance(n, bool) or n < 3 or n % 2 == 0:
        errs.append(f"{path}.points_per_axis: must be an odd integer >= 3 (got {n!r})")
    ext = block.get("extent", 8.0)
    if not _is_num(ext) or ext <= 0:
        errs.append(f"{path}.extent: must be a positive number")


def _build_space(block, errs):
    if not isinstance(block, dict):
        errs.append("model.marks: expected a mapping")
        return None
    if "grid" in block:
        g = block["grid"] or {}
        count = g.get("count")
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            errs.append("model.marks.grid.count: must be a positive integer")
            return None
        lo, hi = g.get("lower", 0.0), g.get("upper", 1.0)
        if not (_is_num(lo) and _is_num(hi) and hi > lo):
            errs.append("model.marks.grid: need numeric lower < upper")
            return None
        return marks.MarkSpace.uniform_grid(count, lo, hi)
    if "weights" not in block:
        errs.append("model.marks: give either 'weights' or 'grid'")
        return None
    w = _num_list(block["weights"], "model.marks.weights", errs, positive=True)
    if w is None or np.any(w <= 0):
        return None
    labels = block.get("labels", ())
    if labels and len(labels) != w.size:
        errs.append(f"model.marks.labels: {len(labels)} labels for {w.size} weights")
        return None
    nodes = block.get("nodes")
    if nodes is not None:
        nodes = _num_list(nodes, "model.marks.nodes", errs)
        if nodes is None:
            return None
        if nodes.size != w.size:
            errs.append("model.marks.nodes: one node per weight required")
            return None
    return marks.MarkSpace(weights=w, labels=tuple(str(x) for x in labels), nodes=nodes)


def _build_kernel(block, space, mortality, errs):
    if not isinstance(block, dict):
        errs.append("model.kernel: expected a mapping")
        return None
    K = space.size
    if "matrix" in block:
        mat = block["matrix"]
        try:
            q = np.asarray(mat, dtype=float)
        except (TypeError, ValueError):
            errs.append("model.kernel.matrix: expected a numeric matrix")
            return None
        if q.shape != (K, K):
            errs.append(f"model.kernel.matrix: shape {q.shape}, expected {(K, K)}")
            return None
        if not np.all(np.isfinite(q)) or np.any(q <= 0):
            bad = [f"[{i}][{j}]" for i, j in zip(*np.nonzero(~(q > 0)))]
            errs.append("model.kernel.matrix: entries must be strictly positive "
                        f"(violations at {', '.join(bad[:6])})")
            return None
        return marks.MarkKernel(space, q, mortality)
    form = block.get("form")
    if form not in ("uniform", "exponential"):
        errs.append(f"model.kernel.form: expected 'uniform' or 'exponential' (got {form!r})")
        return None
    params = {k: v for k, v in block.items() if k != "form"}
    for k, v in params.items():
        if not _is_num(v) or v <= 0:
            errs.append(f"model.kernel.{k}: must be a positive number")
            return None
    try:
        return marks.MarkKernel.from_form(space, form, mortality, **params)
    except ValueError as exc:
        errs.append(f"model.kernel: {exc}")
        return None


def _build_dispersal(block, dim, base_dir, errs):
    if not isinstance(block, dict):
        errs.append("model.dispersal: expected a mapping")
        return None
    kind = block.get("type", "gaussian")
    try:
        if kind == "gaussian":
            cov = block.get("cov", 1.0)
            loc = block.get("mean")
            return disp_mod.Gaussian(dim, cov=cov, loc=loc)
        if kind == "uniform_ball":
            return disp_mod.UniformBall(dim, float(block.get("radius", 1.0)))
        if kind == "tabulated":
            path = block.get("path")
            if not isinstance(path, str):
                errs.append("model.dispersal.path: tabulated kernels need a CSV path")
                return None
            if base_dir and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            tab = disp_mod.load_tabulated_csv(path)
            if tab.dim != dim:
                errs.append(f"model.dispersal.path: table is {tab.dim}-dimensional, "
                            f"model.dim is {dim}")
                return None
            return tab
    except (ValueError, TypeError, OSError) as exc:
        errs.append(f"model.dispersal: {exc}")
        return None
    errs.append(f"model.dispersal.type: unknown kernel type {kind!r}")
    return None


def config_from_dict(raw, source=None):
    """Validate a configuration mapping; raise `ConfigError` with every violation."""
    errs = []
    if not isinstance(raw, dict):
        raise ConfigError([": top level must be a mapping"])
    raw = copy.deepcopy(raw)
    _check_keys(raw, "", errs)
    model = raw.get("model")
    if not isinstance(model, dict):
        raise ConfigError(errs + ["model: required mapping is missing"])
    task = raw.get("task") or {}
    output = raw.get("output") or {}

    dim = model.get("dim", 3)
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        errs.append(f"model.dim: must be an integer >= 1 (got {dim!r})")
        dim = None
    L = model.get("torus_length", 10.0)
    if not _is_num(L) or L <= 0:
        errs.append("model.torus_length: must be a positive number")
        L = None

    space = _build_space(model.get("marks", {"weights": [1.0]}), errs)
    mortality = None
    if "mortality" in model and space is not None:
        mortality = _num_list(model["mortality"], "model.mortality", errs, positive=True)
        if mortality is not None and mortality.size != space.size:
            errs.append(f"model.mortality: {mortality.size} entries for {space.size} marks")
            mortality = None
        elif mortality is not None and np.any(mortality <= 0):
            mortality = None
    kernel = None
    if space is not None:
        kernel = _build_kernel(model.get("kernel", {"form": "uniform"}), space, mortality, errs)
    base_dir = os.path.dirname(os.path.abspath(source)) if source else None
    dispersal = None
    if dim is not None:
        dispersal = _build_dispersal(model.get("dispersal", {"type": "gaussian"}), dim,
                                     base_dir, errs)
    if dispersal is not None:
        rep = disp_mod.validate(dispersal, stationary.MomentumGrid(dim, 8.0, 9))
        for name in rep.failures():
            errs.append(f"model.dispersal: assumption '{name}' fails "
                        f"(value {rep.checks[name][1]!r})")
        if L is not None and L < 8 * dispersal.std_max():
            errs.append(f"model.torus_length: {L} is below 8 dispersal standard deviations "
                        f"({8 * dispersal.std_max():.4g})")

    # task block
    rho = task.get("rho", 1.0)
    if not _is_num(rho) or rho < 0:
        errs.append("task.rho: must be a nonnegative number")
    if "h" in task and space is not None:
        h = _num_list(task["h"], "task.h", errs, nonneg=True)
        if h is not None:
            if h.size != space.size:
                errs.append(f"task.h: {h.size} entries for {space.size} marks")
            elif abs(h @ space.weights - 1.0) > 1e-8:
                errs.append(f"task.h: not normalized (integral {h @ space.weights!r} != 1)")
    seed = task.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2 ** 64:
        errs.append("task.seed: must be an integer in [0, 2^64)")
    reps = task.get("replicas", 100)
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        errs.append(f"task.replicas: must be a positive integer (got {reps!r})")
    for path in ("pair.grid", "evolve.grid", "validate.evolve_grid"):
        head, tail = path.split(".")
        blk = task.get(head)
        if isinstance(blk, dict) and isinstance(blk.get(tail), dict):
            _grid_check(blk[tail], f"task.{path}", errs)
    for head in ("pair",):
        refs = (task.get(head) or {}).get("refinements")
        if refs is not None:
            if not isinstance(refs, list) or not all(
                    isinstance(n, int) and n >= 3 and n % 2 == 1 for n in refs):
                errs.append(f"task.{head}.refinements: need odd integers >= 3")
    for head in ("simulate", "validate"):
        bins = (task.get(head) or {}).get("pair_bins")
        if isinstance(bins, dict) and L is not None:
            up = bins.get("upper", 4.0)
            lo = bins.get("lower", 0.5)
            if not (_is_num(lo) and _is_num(up) and 0 <= lo < up):
                errs.append(f"task.{head}.pair_bins: need numeric 0 <= lower < upper")
            elif up > L / 2:
                errs.append(f"task.{head}.pair_bins.upper: {up} exceeds half the torus "
                            f"length ({L / 2})")
    formats = output.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or any(f not in ("csv", "json") for f in formats):
        errs.append("output.formats: only 'csv' and 'json' are supported")

    eigen = None
    kappa = None
    token = model.get("kappa", "critical")
    if kernel is not None:
        try:
            eigen = marks.leading_eigen(kernel, rescaled=not kernel.homogeneous)
        except marks.ConvergenceError as exc:
            errs.append(f"model.kernel: {exc}")
    if token == "critical":
        kappa = None if eigen is None else eigen.kappa_cr
    elif _is_num(token) and token > 0:
        kappa = float(token)
    else:
        errs.append(f"model.kappa: expected a positive number or 'critical' (got {token!r})")

    if errs:
        raise ConfigError(errs)
    return RunConfig(raw=raw, dim=dim, torus_length=float(L), space=space, kernel=kernel,
                     eigen=eigen, dispersal=dispersal, kappa=float(kappa), kappa_token=token,
                     task=task, output=output, source=source)


def parse_config(path):
    """Read and validate a YAML run configuration."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f": cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f": YAML syntax error: {exc}"]) from exc
    return config_from_dict(raw if raw is not None else {}, source=path)


# ----------------------------------------------------------------------------
# output helpers

def _fmt(x):
    return repr(float(x))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    return x


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _new_run_dir(base, sub):
    os.makedirs(base, exist_ok=True)
    i = 1
    while True:
        path = os.path.join(base, f"{sub}-{i:03d}")
        try:
            os.mkdir(path)
            return path
        except FileExistsError:
            i += 1


def _grid_from(block, dim):
    block = block or {}
    return stationary.MomentumGrid(dim, float(block.get("extent", 8.0)),
                                   int(block.get("points_per_axis", 65)))


# ----------------------------------------------------------------------------
# subcommands

def _spectrum(cfg, out):
    opts = cfg.sub("spectrum")
    eig = marks.leading_eigen(cfg.kernel, rescaled=cfg.rescaled,
                              tol=float(opts.get("tol", 1e-12)),
                              max_iter=int(opts.get("max_iter", 100_000)))
    doc = {
        "r": eig.r, "kappa_cr": eig.kappa_cr, "q": eig.q, "q_adj": eig.q_adj,
        "spectral_gap": eig.spectral_gap, "rescaled": eig.rescaled,
        "iterations": eig.iterations, "residual": eig.residual,
        "kappa": cfg.kappa, "labels": list(cfg.space.labels),
    }
    grid_block = (cfg.raw["model"].get("marks") or {}).get("grid")
    if grid_block is not None:
        counts = opts.get("k_counts") or sorted({max(1, cfg.space.size // 4),
                                                 max(1, cfg.space.size // 2), cfg.space.size})
        kblock = cfg.raw["model"].get("kernel", {"form": "uniform"})

        def make(K):
            sp = marks.MarkSpace.uniform_grid(K, grid_block.get("lower", 0.0),
                                              grid_block.get("upper", 1.0))
            mort = None
            if cfg.rescaled:
                mort = np.interp(sp.nodes, cfg.space.nodes, cfg.kernel.mortality)
            params = {k: v for k, v in kblock.items() if k != "form"}
            return marks.MarkKernel.from_form(sp, kblock.get("form", "uniform"), mort, **params)

        if "form" in kblock:
            doc["convergence_in_k"] = marks.eigen_convergence_in_k(make, counts, cfg.rescaled)
    _write_json(os.path.join(out, "eigen.json"), doc)
    return {"status": "ok"}


def _pair(cfg, out):
    opts = cfg.sub("pair")
    grid = _grid_from(opts.get("grid"), cfg.dim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pair = stationary.solve_pair(cfg.kernel, cfg.eigen, cfg.dispersal, cfg.rho, grid,
                                     kappa=cfg.kappa)
    res = stationary.stationarity_residual(pair)
    if opts.get("write_modes", True):
        stationary.write_pair_modes_csv(pair, os.path.join(out, "pair_modes.csv"))
    distances = opts.get("distances") or np.linspace(0.0, 5.0, 21).tolist()
    direction = opts.get("direction") or [1.0] + [0.0] * (cfg.dim - 1)
    stationary.write_pair_slice_csv(pair, direction, distances,
                                    os.path.join(out, "pair_slice.csv"))
    refs = tuple(opts.get("refinements") or (65, 129, 257, 513, 1025))
    crit = stationary.criticality_integral(cfg.dispersal, extent=grid.extent, refinements=refs)
    with open(os.path.join(out, "criticality.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["points_per_axis", "spacing", "value"])
        for n, h, v in zip(crit.points, crit.spacings, crit.values):
            wr.writerow([n, _fmt(h), _fmt(v)])
    w = np.asarray(distances, float)[:, None] * (np.asarray(direction, float)
                                                 / np.linalg.norm(direction))[None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", stationary.AliasingWarning)
        bound = stationary.pair_bound(pair, w)
    _write_json(os.path.join(out, "pair_summary.json"), {
        "grid": {"dim": grid.dim, "extent": grid.extent,
                 "points_per_axis": grid.points_per_axis},
        "rho": cfg.rho, "kappa": cfg.kappa, "residual": res, "bound_B": bound,
        "criticality": {"values": crit.values, "relative_changes": crit.relative_changes,
                        "converged": crit.converged(), "diverging": crit.diverging()},
        "warnings": [str(c.message) for c in caught],
    })
    return {"status": "ok"}


def _evolve(cfg, out):
    opts = cfg.sub("evolve")
    t_end = float(opts.get("t_end", 20.0))
    samples = opts.get("samples")
    dt = opts.get("dt")
    h = cfg.h
    rho1 = marks.asymptotic_density(cfg.eigen, cfg.space, cfg.rho, h)
    traj = hierarchy.evolve_k1(cfg.kernel, cfg.kappa, cfg.rho * h, t_end, dt=dt,
                               sample_times=samples)
    hierarchy.write_k1_trajectory_csv(traj, os.path.join(out, "k1_trajectory.csv"))
    conv1 = hierarchy.convergence_report(traj, rho1 * cfg.eigen.q)
    hierarchy.write_convergence_csv(conv1, os.path.join(out, "k1_convergence.csv"))
    doc = {"rho": cfg.rho, "rho1": rho1, "kappa": cfg.kappa,
           "k1_final_distance": conv1.distances[-1]}
    if opts.get("k2", True) and cfg.dim >= 3:
        grid = _grid_from(opts.get("grid"), cfg.dim)
        traj2 = hierarchy.evolve_k2(cfg.kernel, cfg.dispersal, grid, cfg.kappa, rho=cfg.rho,
                                    h=h, t_end=t_end, dt=dt, sample_times=samples)
        hierarchy.write_k2_trajectory_csv(
            traj2, os.path.join(out, "k2_trajectory.csv"),
            distances=opts.get("distances") or (0.0, 0.5, 1.0, 2.0, 4.0))
        target = stationary.solve_pair(cfg.kernel, cfg.eigen, cfg.dispersal, rho1, grid,
                                       kappa=cfg.kappa)
        conv2 = hierarchy.convergence_report(traj2, target)
        hierarchy.write_convergence_csv(conv2, os.path.join(out, "k2_convergence.csv"))
        doc["k2_distances"] = [[t, d] for t, d in conv2]
    _write_json(os.path.join(out, "evolve_summary.json"), doc)
    return {"status": "ok"}


def _simulate(cfg, out):
    opts = cfg.sub("simulate")
    t_end = float(opts.get("t_end", 5.0))
    params = simulator.SimParams(cfg.kernel, cfg.dispersal, cfg.kappa, cfg.torus_length,
                                 t_end, seed=cfg.seed, replicas=cfg.replicas)
    samples = opts.get("samples") or np.linspace(0.0, t_end, 11).tolist()
    bins = opts.get("pair_bins")
    pair_times = [float(t) for t in (opts.get("pair_times") or ([t_end] if bins else []))]
    samples = sorted(set(float(t) for t in samples) | set(pair_times))
    log = simulator.run(params, simulator.PoissonStart(cfg.rho, cfg.h), sample_times=samples,
                        snapshot_times=pair_times, n_jobs=int(opts.get("n_jobs", 1)))
    simulator.write_observation_csv(log, os.path.join(out, "observations.csv"))
    with open(os.path.join(out, "density.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time", "density", "stderr"]
                    + [f"mark_{k}" for k in range(cfg.space.size)])
        for t in log.sample_times:
            d, e = simulator.estimate_density(log, t)
            c = log.counts[:, log.time_index(t), :].mean(axis=0) / params.volume
            wr.writerow([_fmt(t), _fmt(d), _fmt(e)] + [_fmt(x) for x in c])
    if bins:
        edges = np.linspace(float(bins.get("lower", 0.5)), float(bins.get("upper", 4.0)),
                            int(bins.get("count", 8)) + 1)
        est = simulator.estimate_pair_correlation(log, edges, pair_times)
        simulator.write_pair_correlation_csv(est, os.path.join(out, "pair_correlation.csv"))
    extinct = sum(r.extinction_time is not None for r in log.replicas)
    return {"status": "ok", "params": params, "extinct_replicas": extinct}


def closure_suite(cfg):
    """Run the cross-module closure checks; returns a list of result dicts.

    Each entry has ``name``, ``value``, ``threshold``, ``passed`` and
    ``detail``.  Checks: (i) k1 fixed point at kappa_cr, (ii) relaxation of
    the density to rho_1 (ODE and Monte Carlo), (iii) markless pair closure
    (spectral vs quadrature, Monte Carlo vs hierarchy), (iv) dimension
    dependence of the criticality integral, (v) decrease of the k2
    distance to stationarity.
    """
    opts = cfg.sub("validate")
    results = []

    def record(name, value, threshold, passed, detail=""):
        results.append({"name": name, "value": value, "threshold": threshold,
                        "passed": bool(passed), "detail": detail})

    kernel, eigen, space = cfg.kernel, cfg.eigen, cfg.space
    kcr = eigen.kappa_cr
    rho = cfg.rho if cfg.rho > 0 else 1.0
    dt = opts.get("dt")

    # (i) fixed point
    t_fp = float(opts.get("fixed_point_t", 50.0))
    traj = hierarchy.evolve_k1(kernel, kcr, rho * eigen.q, t_fp, dt=dt)
    dev = float(np.max(np.abs(traj.values - rho * eigen.q)))
    record("k1_fixed_point", dev, 1e-10, dev <= 1e-10, f"t in [0, {t_fp}]")

    # (ii) relaxation to rho_1
    h = cfg.h
    rho1 = marks.asymptotic_density(eigen, space, rho, h)
    gap = eigen.spectral_gap or 1.0
    G = hierarchy.k1_generator(kernel, kcr)
    lam = np.sort(np.real(np.linalg.eigvals(G)))
    rate = -lam[-2] if lam.size > 1 else 1.0
    t_relax = float(opts.get("relax_t", max(10.0, 32.0 / max(rate, 1e-3))))
    traj = hierarchy.evolve_k1(kernel, kcr, rho * h, t_relax, dt=dt)
    err = abs(traj.densities()[-1] - rho1)
    record("k1_relaxation_ode", err, 1e-8, err <= 1e-8,
           f"rho1={rho1!r}, t={t_relax}, gap={gap:.4g}")
    mc_t = float(opts.get("mc_t", 10.0))
    params = simulator.SimParams(kernel, cfg.dispersal, kcr, cfg.torus_length, mc_t,
                                 seed=cfg.seed, replicas=int(opts.get("mc_replicas",
                                                                      cfg.replicas)))
    log = simulator.run(params, simulator.PoissonStart(rho, h), sample_times=[0.0, mc_t])
    est, se = simulator.estimate_density(log, mc_t)
    z = abs(est - rho1) / se if se > 0 else np.inf
    record("k1_relaxation_mc", z, 3.0, z <= 3.0,
           f"estimate {est:.5g} +- {se:.3g} vs rho1 {rho1:.5g}")

    # (iii) markless pair closure with the model's dispersal
    if cfg.dim >= 3:
        single = marks.MarkKernel(marks.MarkSpace.single(), np.ones((1, 1)))
        e1 = marks.leading_eigen(single)
        if cfg.dispersal.isotropic:
            grid = stationary.MomentumGrid(cfg.dim, 8.0, 65)
            pair = stationary.solve_pair(single, e1, cfg.dispersal, rho, grid)
            dist = np.linspace(0.25, 5.0, 20)
            direc = np.ones(cfg.dim) / np.sqrt(cfg.dim)
            spectral = stationary.assemble_pair_real(pair, dist[:, None] * direc[None])[:, 0, 0]
            quad = _radial_quadrature(cfg.dispersal, rho, dist)
            err = float(np.max(np.abs(spectral - quad)))
            tol = float(opts.get("quadrature_tol", 1e-6))
            record("pair_spectral_vs_quadrature", err, tol, err <= tol, "20 separations")
        bins = opts.get("pair_bins") or {}
        sigma = cfg.dispersal.std_max()
        edges = np.linspace(float(bins.get("lower", 0.5 * sigma)),
                            float(bins.get("upper", min(4.0 * sigma, cfg.torus_length / 2))),
                            int(bins.get("count", 7)) + 1)
        pt = float(opts.get("pair_t", 5.0))
        z, detail = _pair_mc_closure(single, cfg.dispersal, rho, cfg.torus_length, pt, edges,
                                     cfg.seed, int(opts.get("pair_replicas", cfg.replicas)))
        record("pair_mc_vs_hierarchy", z, 1.0, z <= 1.0, detail)

    # (iv) dimension dependence, gaussian with the model's mean variance
    var = float(np.trace(np.atleast_2d(cfg.dispersal.covariance)) / cfg.dim)
    refs = tuple(opts.get("refinements") or (65, 129, 257, 513, 1025))
    c3 = stationary.criticality_integral(disp_mod.Gaussian(3, var), refinements=refs)
    c2 = stationary.criticality_integral(disp_mod.Gaussian(2, var), refinements=refs)
    record("criticality_d3_converges", abs(c3.last_change), 0.01, c3.converged(0.01),
           f"values {c3.values}")
    record("criticality_d2_diverges", c2.total_growth, 0.2, c2.diverging(0.2),
           f"values {c2.values}")

    # (v) evolving k2 approaches the stationary solution
    if cfg.dim >= 3:
        times = [float(t) for t in (opts.get("evolve_times") or (5.0, 20.0))]
        grid = _grid_from(opts.get("evolve_grid"), cfg.dim)
        traj2 = hierarchy.evolve_k2(kernel, cfg.dispersal, grid, kcr, rho=rho, h=eigen.q,
                                    t_end=max(times), dt=dt or 0.02, sample_times=times)
        target = stationary.solve_pair(kernel, eigen, cfg.dispersal, rho, grid)
        conv = hierarchy.convergence_report(traj2, target)
        d = [conv.at(t) for t in times]
        record("k2_distance_decreases", d[-1] - d[0], 0.0, d[-1] < d[0],
               f"distances {dict(zip(times, d))}")
    return results


def _radial_quadrature(dispersal, rho, r):
    """Inverse transform of the markless pair transform by 1-d radial quadrature (d = 3)."""
    from scipy import integrate

    if dispersal.dim != 3 or not dispersal.isotropic:
        raise ValueError("radial quadrature oracle needs an isotropic 3-d kernel")
    var = float(np.atleast_2d(dispersal.covariance)[0, 0])

    def integrand(p, x):
        if p < 1e-6:
            # p^2 k_hat(p) -> 2 rho / var, so p k_hat(p) sin(p x) -> 2 rho x / var
            return 2 * rho * x / var
        a = np.real(dispersal.char_fn(np.array([p, 0.0, 0.0])))
        return p * rho * 2 * a / (2 - 2 * a) * np.sin(p * x)

    upper = 40.0 / np.sqrt(var)
    out = []
    for x in r:
        val = integrate.quad(integrand, 0, upper, args=(x,), limit=400,
                             epsabs=1e-13, epsrel=1e-13)[0]
        out.append(rho ** 2 + val / (2 * np.pi ** 2 * x))
    return np.array(out)


def _pair_mc_closure(kernel, dispersal, rho, L, t, edges, seed, replicas):
    """Max over bins of |MC - hierarchy| / (3 stderr + grid tol); <= 1 passes."""
    params = simulator.SimParams(kernel, dispersal, 1.0, L, t, seed=seed, replicas=replicas)
    log = simulator.run(params, simulator.PoissonStart(rho), sample_times=[0.0, t],
                        snapshot_times=[t])
    est = simulator.estimate_pair_correlation(log, edges, [t])
    grid = stationary.MomentumGrid.torus(dispersal.dim, L, 8.0)
    fine = stationary.MomentumGrid.torus(dispersal.dim, L, 10.0)
    eigen = marks.leading_eigen(kernel)

    def theory(g, dt):
        tr = hierarchy.evolve_k2(kernel, dispersal, g, eigen.kappa_cr, rho=rho, t_end=t,
                                 dt=dt, sample_times=[t], zero_mode=True)
        return stationary.shell_average(tr.state(len(tr) - 1), edges)[:, 0, 0]

    th = theory(grid, 0.02)
    grid_tol = np.abs(th - theory(fine, 0.01)) + 1e-9
    mc, se = est.values[:, 0, 0], est.stderr[:, 0, 0]
    score = np.abs(mc - th) / (3 * se + grid_tol)
    worst = int(np.nanargmax(score))
    detail = (f"worst bin [{edges[worst]:.3g},{edges[worst + 1]:.3g}): MC {mc[worst]:.5g} "
              f"+- {se[worst]:.3g}, hierarchy {th[worst]:.5g}")
    return float(np.nanmax(score)), detail


def _validate(cfg, out):
    results = closure_suite(cfg)
    with open(os.path.join(out, "validation.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["check", "value", "threshold", "passed"])
        for r in results:
            wr.writerow([r["name"], _fmt(r["value"]), _fmt(r["threshold"]),
                         "pass" if r["passed"] else "FAIL"])
    _write_json(os.path.join(out, "validation.json"), results)
    ok = all(r["passed"] for r in results)
    return {"status": "ok" if ok else "failed", "results": results}


_HANDLERS = {"spectrum": _spectrum, "pair": _pair, "evolve": _evolve,
             "simulate": _simulate, "validate": _validate}


def dispatch(cfg, subcommand, out_dir=None, seed=None, replicas=None, log=print):
    """Run one subcommand; returns (exit status, run directory).

    ``seed`` and ``replicas`` override the task block.  Outputs go to a new
    ``<out_dir>/<subcommand>-NNN`` directory with a ``manifest.json``.
    """
    if subcommand not in _HANDLERS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {SUBCOMMANDS}")
    if seed is not None or replicas is not None:
        raw = copy.deepcopy(cfg.raw)
        task = raw.setdefault("task", {}) or {}
        raw["task"] = task
        if seed is not None:
            task["seed"] = seed
        if replicas is not None:
            task["replicas"] = replicas
        cfg = config_from_dict(raw, source=cfg.source)
    base = out_dir or cfg.output.get("directory") or "runs"
    out = _new_run_dir(base, subcommand)
    started = time.time()
    manifest = {
        "subcommand": subcommand,
        "config": cfg.raw,
        "config_path": cfg.source,
        "kappa": cfg.kappa,
        "kappa_token": cfg.kappa_token,
        "seed": cfg.seed,
        "replicas": cfg.replicas,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "complete": False,
    }
    status = EXIT_OK
    try:
        result = _HANDLERS[subcommand](cfg, out)
        manifest["complete"] = True
        if subcommand == "validate":
            manifest["results"] = result["results"]
            if result["status"] != "ok":
                status = EXIT_FAILED
        if subcommand == "simulate":
            manifest["extinct_replicas"] = result["extinct_replicas"]
    except (stationary.CriticalityError, marks.ConvergenceError,
            hierarchy.StabilityError, ValueError) as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["partial_outputs"] = sorted(os.listdir(out))
        status = EXIT_FAILED
        log(f"error: {exc}")
    manifest["elapsed_seconds"] = time.time() - started
    manifest["exit_status"] = status
    from . import __version__
    import scipy
    manifest["versions"] = {"qscontact": __version__, "numpy": np.__version__,
                            "scipy": scipy.__version__}
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return status, out
