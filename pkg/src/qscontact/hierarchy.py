"""Time evolution of the first two correlation functions.

Both equations are linear with constant coefficients:

    dk1/dt = kappa Q k1 - m k1,
    dk_hat/dt(p) = -A(p) k_hat(p) + f_hat(p; k1(t)),

with A(p) the per-mode pair operator of `qscontact.stationary`.  The
product (Poisson) initial data sits entirely in the p = 0 part of k2: its
constant term C obeys dC/dt = -A(0) C, which keeps C(t) = k1(t) x k1(t)
when it starts as a product.  Everything is integrated with classical RK4
at a fixed step.

The generator depends on p only through (a(p), a(-p)), so modes sharing
those values are evolved once and scattered back; for isotropic kernels
that shrinks a 65^3 lattice to a few thousand distinct systems.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .stationary import (
    AliasingWarning,
    PairGrid,
    apply_pair_operator,
    assemble_pair_real,
    pair_forcing,
)

__all__ = [
    "StabilityError",
    "K1State",
    "K1Trajectory",
    "K2Trajectory",
    "ConvergenceSeries",
    "default_dt",
    "k1_generator",
    "evolve_k1",
    "evolve_k2",
    "convergence_report",
    "write_k1_trajectory_csv",
    "write_k2_trajectory_csv",
    "write_convergence_csv",
]

# RK4 is stable on the negative real axis up to |dt * lambda| ~ 2.785
_RK4_LIMIT = 2.5


class StabilityError(ValueError):
    """The time step exceeds the explicit RK4 stability bound."""


def _operator_norm(kernel, kappa):
    return float(kappa * np.max(np.abs(kernel.operator()).sum(axis=1)))


def default_dt(kernel, kappa):
    """0.01 / (1 + kappa ||Q||) with the max-row-sum operator norm."""
    return 0.01 / (1.0 + _operator_norm(kernel, kappa))


def _check_dt(dt, bound):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt * bound > _RK4_LIMIT:
        raise StabilityError(
            f"dt = {dt:g} exceeds the RK4 stability bound {_RK4_LIMIT / bound:.4g} "
            f"(generator norm bound {bound:.4g})")


def _segments(sample_times, dt):
    """Yield (t0, t1, n_steps) with equal steps of at most dt between samples."""
    for t0, t1 in zip(sample_times[:-1], sample_times[1:]):
        span = t1 - t0
        n = max(1, int(np.ceil(span / dt - 1e-9)))
        yield t0, t1, n


def _sample_grid(t_end, sample_times):
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    if sample_times is None:
        times = np.linspace(0.0, t_end, 11)
    else:
        times = np.unique(np.concatenate([[0.0], np.asarray(sample_times, dtype=float)]))
        if np.any(times < 0) or times[-1] > t_end + 1e-12:
            raise ValueError("sample times must lie in [0, t_end]")
        if times[-1] < t_end:
            times = np.append(times, t_end)
    return times


def k1_generator(kernel, kappa):
    """Matrix G of dk1/dt = G k1, i.e. kappa Q diag(nu) - diag(m)."""
    return kappa * kernel.operator() - np.diag(kernel.mortality)


def _rk4_propagator(gen, h):
    """One RK4 step of a linear autonomous system, as a matrix."""
    x = h * gen
    eye = np.eye(gen.shape[0])
    x2 = x @ x
    return eye + x + x2 / 2 + x2 @ x / 6 + x2 @ x2 / 24


@dataclass(frozen=True)
class K1State:
    time: float
    values: np.ndarray


@dataclass
class K1Trajectory:
    """Sampled k1(t); ``values[i]`` is the K-vector at ``times[i]``."""

    times: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.times.size

    def __getitem__(self, i):
        return K1State(float(self.times[i]), self.values[i])

    def densities(self):
        """Total spatial density sum_i k1_i nu_i at each sampled time."""
        return self.values @ self.weights


def evolve_k1(kernel, kappa, initial, t_end, dt=None, sample_times=None):
    """Integrate dk1/dt = kappa Q k1 - m k1 with fixed-step RK4.

    Parameters
    ----------
    kernel : MarkKernel
    kappa : float
    initial : array_like, shape (K,)
        Nonnegative starting values, e.g. ``rho * h``.
    t_end : float
    dt : float, optional
        Step size; defaults to `default_dt`.  Steps are shrunk slightly so
        every sample time is hit exactly.
    sample_times : array_like, optional
        Times to record (0 and ``t_end`` are always included); default is
        11 equally spaced samples.

    Returns
    -------
    K1Trajectory
    """
    initial = np.asarray(initial, dtype=float)
    K = kernel.space.size
    if initial.shape != (K,):
        raise ValueError(f"initial has shape {initial.shape}, expected {(K,)}")
    if np.any(initial < 0):
        raise ValueError("initial values must be nonnegative")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    gen = k1_generator(kernel, kappa)
    dt = default_dt(kernel, kappa) if dt is None else float(dt)
    _check_dt(dt, np.max(np.abs(gen).sum(axis=1)))
    times = _sample_grid(t_end, sample_times)
    out = [initial.copy()]
    x = initial.copy()
    for t0, t1, n in _segments(times, dt):
        step = _rk4_propagator(gen, (t1 - t0) / n)
        for _ in range(n):
            x = step @ x
        out.append(x.copy())
    return K1Trajectory(times, np.array(out), kernel.space.weights.copy())


@dataclass
class K2Trajectory:
    """Sampled pair-function states of `evolve_k2`.

    Mode values are stored for the distinct (a(p), a(-p)) classes only;
    `state` expands them to a full `PairGrid`.
    """

    template: PairGrid
    times: np.ndarray
    k1: np.ndarray
    constants: np.ndarray
    reduced: np.ndarray
    inverse: np.ndarray
    zero_modes: np.ndarray | None = None
    counts: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.times.size

    def values(self, i):
        return self.reduced[i][self.inverse]

    def state(self, i):
        """The i-th sample as a time-stamped `PairGrid`."""
        z = None if self.zero_modes is None else self.zero_modes[i]
        pair = self.template.copy_with(self.values(i), time=float(self.times[i]),
                                       constant_term=self.constants[i], zero_mode=z)
        pair.k1 = self.k1[i]
        return pair

    def __getitem__(self, i):
        return self.state(i)


def _mode_classes(ap, am, initial):
    if initial is not None:
        idx = np.arange(ap.size)
        return idx, idx, np.ones(ap.size)
    key = np.stack([ap.real, ap.imag, am.real, am.imag], axis=1)
    _, first, inverse, counts = np.unique(key, axis=0, return_index=True,
                                          return_inverse=True, return_counts=True)
    return first, inverse.ravel(), counts


def evolve_k2(kernel, dispersal, grid, kappa, rho=None, h=None, t_end=10.0, dt=None,
              sample_times=None, mode="self", k1_frozen=None, initial=None,
              zero_mode=False):
    """Integrate the order-2 equation mode by mode from Poisson initial data.

    Parameters
    ----------
    kernel : MarkKernel
    dispersal : DispersalKernel
    grid : MomentumGrid
    kappa : float
    rho : float
        Initial intensity; k1(0) = rho h.
    h : array_like, optional
        Normalized mark density of the initial field (default: the constant
        function 1 / |nu|).  Pass the Perron vector q for the critical
        product start.
    t_end, dt, sample_times
        As in `evolve_k1`.
    mode : {"self", "frozen"}
        ``"self"`` evolves k1 alongside and feeds it into the forcing;
        ``"frozen"`` holds the forcing at ``k1_frozen``.
    k1_frozen : array_like, optional
        Forcing density for ``mode="frozen"`` (defaults to ``rho * h``).
    initial : PairGrid or ndarray, optional
        Starting mode values (default zero: the product start has no
        transform part).
    zero_mode : bool
        Also evolve the p = 0 coefficient of the non-constant part.  On a
        torus lattice (see `MomentumGrid.torus`) it carries the global
        fluctuation of the particle number.

    Returns
    -------
    K2Trajectory
    """
    if grid.dim != dispersal.dim:
        raise ValueError("grid and dispersal dimensions differ")
    if mode not in ("self", "frozen"):
        raise ValueError(f"unknown mode {mode!r}")
    K = kernel.space.size
    weights = kernel.space.weights
    if h is None:
        h = np.full(K, 1.0 / weights.sum())
    h = np.asarray(h, dtype=float)
    if h.shape != (K,) or np.any(h < 0):
        raise ValueError("h must be a nonnegative K-vector")
    if abs(h @ weights - 1.0) > 1e-8:
        raise ValueError(f"h is not normalized: integral {h @ weights!r} != 1")
    if rho is None or not rho >= 0:
        raise ValueError("rho must be nonnegative")
    k1_0 = rho * h
    frozen = None
    if mode == "frozen":
        frozen = k1_0 if k1_frozen is None else np.asarray(k1_frozen, dtype=float)

    ap, am = (np.atleast_1d(dispersal.char_fn(grid.points())),
              np.atleast_1d(dispersal.char_fn(-grid.points())))
    init_vals = None
    if initial is not None:
        init_vals = initial.values if isinstance(initial, PairGrid) else np.asarray(initial)
        if init_vals.shape != (grid.size, K, K):
            raise ValueError("initial mode values do not match the grid")
    first, inverse, counts = _mode_classes(ap, am, init_vals)
    ap_r, am_r = ap[first], am[first]

    gen1 = k1_generator(kernel, kappa)
    dt = default_dt(kernel, kappa) if dt is None else float(dt)
    bound = max(np.max(np.abs(gen1).sum(axis=1)),
                2 * np.max(kernel.mortality) + 2 * _operator_norm(kernel, kappa))
    _check_dt(dt, bound)

    one = np.ones(1)

    def rhs(state):
        k1, C, kh, z = state
        src = k1 if frozen is None else frozen
        dk1 = gen1 @ k1 if frozen is None else np.zeros_like(k1)
        dC = -apply_pair_operator(kernel, kappa, one, one, C[None])[0]
        dkh = (-apply_pair_operator(kernel, kappa, ap_r, am_r, kh)
               + pair_forcing(kernel, kappa, src, ap_r, am_r))
        dz = None
        if z is not None:
            dz = (-apply_pair_operator(kernel, kappa, one, one, z[None])[0]
                  + pair_forcing(kernel, kappa, src, one, one)[0])
        return dk1, dC, dkh, dz

    def axpy(state, a, d):
        return tuple(None if s is None else s + a * ds for s, ds in zip(state, d))

    state = (
        k1_0.copy(),
        np.outer(k1_0, k1_0),
        np.zeros((first.size, K, K), dtype=complex) if init_vals is None
        else init_vals.astype(complex).copy(),
        np.zeros((K, K), dtype=complex) if zero_mode else None,
    )
    times = _sample_grid(t_end, sample_times)
    rec = [state]
    for t0, t1, n in _segments(times, dt):
        step = (t1 - t0) / n
        for _ in range(n):
            d1 = rhs(state)
            d2 = rhs(axpy(state, step / 2, d1))
            d3 = rhs(axpy(state, step / 2, d2))
            d4 = rhs(axpy(state, step, d3))
            state = tuple(
                None if s is None else s + step / 6 * (a + 2 * b + 2 * c + d)
                for s, a, b, c, d in zip(state, d1, d2, d3, d4))
        rec.append(state)

    template = PairGrid(grid, kernel, dispersal, float(rho), float(kappa), k1_0,
                        np.zeros((0, K, K), dtype=complex), np.outer(k1_0, k1_0), time=0.0)
    return K2Trajectory(
        template=template,
        times=times,
        k1=np.array([s[0] for s in rec]),
        constants=np.array([s[1] for s in rec]),
        reduced=np.array([s[2] for s in rec]),
        inverse=inverse,
        zero_modes=np.array([s[3] for s in rec]) if zero_mode else None,
        counts=counts,
    )


@dataclass
class ConvergenceSeries:
    """Distances to a target at the sampled times of a trajectory."""

    times: np.ndarray
    distances: np.ndarray

    def __iter__(self):
        return iter(zip(self.times.tolist(), self.distances.tolist()))

    def at(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise KeyError(f"time {t} was not sampled")
        return float(self.distances[i])


def convergence_report(trajectory, target):
    """Sup-norm distance of each sampled state to ``target``.

    For a `K1Trajectory` the target is a K-vector and the distance is the
    sup over marks.  For a `K2Trajectory` the target is a `PairGrid` on the
    same grid; the distance bounds the real-space sup norm by the
    transform: sum over modes of max_marks |k_hat - target_hat| times the
    quadrature weight, plus the difference of the constant terms (and of
    the p = 0 coefficients when present).
    """
    if isinstance(trajectory, K1Trajectory):
        target = np.asarray(target, dtype=float)
        if target.shape != trajectory.values.shape[1:]:
            raise ValueError("target does not match the trajectory's mark count")
        dist = np.max(np.abs(trajectory.values - target[None]), axis=1)
        return ConvergenceSeries(trajectory.times.copy(), dist)
    if isinstance(trajectory, K2Trajectory):
        if not isinstance(target, PairGrid):
            raise TypeError("k2 trajectories are compared with a PairGrid")
        grid = trajectory.template.grid
        if target.grid != grid or target.values.shape[1:] != trajectory.reduced.shape[2:]:
            raise ValueError("target grid or mark count does not match the trajectory")
        tgt_zero = 0.0 if target.zero_mode is None else target.zero_mode
        dist = []
        for i in range(len(trajectory)):
            diff = np.abs(trajectory.values(i) - target.values).max(axis=(1, 2))
            d = diff.sum() * grid.weight
            d += np.abs(trajectory.constants[i] - target.constant_term).max()
            if trajectory.zero_modes is not None or target.zero_mode is not None:
                z = 0.0 if trajectory.zero_modes is None else trajectory.zero_modes[i]
                d += np.abs(np.asarray(z - tgt_zero)).max() * grid.weight
            dist.append(d)
        return ConvergenceSeries(trajectory.times.copy(), np.array(dist))
    raise TypeError(f"unsupported trajectory type {type(trajectory).__name__}")


def _fmt(x):
    return repr(float(x))


def write_k1_trajectory_csv(traj, path):
    """Rows: time, density, k1 per mark."""
    K = traj.values.shape[1]
    dens = traj.densities()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time", "density"] + [f"k1_{i}" for i in range(K)])
        for t, d, v in zip(traj.times, dens, traj.values):
            wr.writerow([_fmt(t), _fmt(d)] + [_fmt(x) for x in v])


def write_k2_trajectory_csv(traj, path, distances=(0.0, 0.5, 1.0, 2.0, 4.0), direction=None):
    """Rows: time, distance, then k2 for every mark pair along a ray."""
    grid = traj.template.grid
    direction = np.eye(grid.dim)[0] if direction is None else np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)
    w = np.asarray(distances, dtype=float)[:, None] * direction[None, :]
    K = traj.reduced.shape[-1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time", "distance"] + [f"k_{a}_{b}" for a in range(K) for b in range(K)])
        for i in range(len(traj)):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AliasingWarning)
                k = assemble_pair_real(traj.state(i), w)
            for r, kk in zip(distances, k):
                wr.writerow([_fmt(traj.times[i]), _fmt(r)] + [_fmt(x) for x in kk.ravel()])


def write_convergence_csv(series, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time", "distance"])
        for t, d in series:
            wr.writerow([_fmt(t), _fmt(d)])
