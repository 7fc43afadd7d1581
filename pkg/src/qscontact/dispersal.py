"""Spatial birth kernels: density, characteristic function, moments, sampler.

The characteristic function follows the convention

    alpha_hat(p) = int exp(i <p, u>) alpha(u) du,

so alpha_hat(0) = 1 and |alpha_hat(p)| < 1 away from p = 0 for any
non-degenerate density.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special, stats
from scipy.interpolate import RegularGridInterpolator

__all__ = [
    "DispersalKernel",
    "Gaussian",
    "UniformBall",
    "Tabulated",
    "ValidationReport",
    "validate",
    "load_tabulated_csv",
    "ball_volume",
]


def ball_volume(dim, radius=1.0):
    return np.pi ** (dim / 2) / special.gamma(dim / 2 + 1) * radius ** dim


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected {dim}-vectors, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite coordinates")
    return x, single


class DispersalKernel:
    """Common interface of the offspring displacement densities."""

    dim: int

    @property
    def mean(self):
        raise NotImplementedError

    @property
    def covariance(self):
        raise NotImplementedError

    @property
    def symmetric(self):
        """True when alpha(u) = alpha(-u), so alpha_hat is real and even."""
        return bool(np.allclose(self.mean, 0.0))

    @property
    def isotropic(self):
        """True when alpha depends on |u| only, so alpha_hat depends on |p| only."""
        cov = np.atleast_2d(self.covariance)
        return self.symmetric and bool(np.allclose(cov, cov[0, 0] * np.eye(self.dim)))

    def mass(self):
        return 1.0

    def second_moment(self):
        """int |u|^2 alpha(u) du."""
        return float(np.trace(self.covariance) + self.mean @ self.mean)

    def density(self, u):
        raise NotImplementedError

    def char_fn(self, p):
        raise NotImplementedError

    def sample_displacement(self, rng, size=None):
        raise NotImplementedError

    def std_max(self):
        """Largest marginal standard deviation (used for torus size guards)."""
        return float(np.sqrt(np.max(np.linalg.eigvalsh(self.covariance))))


@dataclass(frozen=True, eq=False)
class Gaussian(DispersalKernel):
    """Normal density with covariance ``cov`` and mean ``loc``.

    A scalar ``cov`` means ``cov * I``.  Singular covariances are accepted
    so that `validate` can report them.
    """

    dim: int
    cov: np.ndarray | float = 1.0
    loc: np.ndarray | None = None

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(self.dim)
        if cov.shape != (self.dim, self.dim):
            raise ValueError(f"covariance must be {self.dim}x{self.dim}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        loc = np.zeros(self.dim) if self.loc is None else np.asarray(self.loc, dtype=float)
        if loc.shape != (self.dim,):
            raise ValueError(f"mean must have length {self.dim}")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "loc", loc)
        vals, vecs = np.linalg.eigh(cov)
        if np.any(vals < -1e-12 * max(1.0, abs(vals).max())):
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "_root", vecs * np.sqrt(np.clip(vals, 0.0, None)))

    @property
    def mean(self):
        return self.loc

    @property
    def covariance(self):
        return self.cov

    def density(self, u):
        u, single = _as_points(u, self.dim)
        out = stats.multivariate_normal(self.loc, self.cov, allow_singular=True).pdf(u)
        out = np.atleast_1d(out)
        return float(out[0]) if single else out

    def char_fn(self, p):
        p, single = _as_points(p, self.dim)
        quad = np.sum((p @ self.cov) * p, axis=1)
        out = np.exp(1j * (p @ self.loc) - 0.5 * quad)
        return complex(out[0]) if single else out

    def sample_displacement(self, rng, size=None):
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, self.dim))
        out = self.loc + z @ self._root.T
        return out[0] if size is None else out


@dataclass(frozen=True, eq=False)
class UniformBall(DispersalKernel):
    """Uniform density on the ball of radius ``radius`` centred at 0."""

    dim: int
    radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def mean(self):
        return np.zeros(self.dim)

    @property
    def covariance(self):
        return self.radius ** 2 / (self.dim + 2) * np.eye(self.dim)

    def density(self, u):
        u, single = _as_points(u, self.dim)
        inside = np.linalg.norm(u, axis=1) <= self.radius
        out = np.where(inside, 1.0 / ball_volume(self.dim, self.radius), 0.0)
        return float(out[0]) if single else out

    def char_fn(self, p):
        p, single = _as_points(p, self.dim)
        out = ball_average_phase(self.dim, np.linalg.norm(p, axis=1) * self.radius)
        out = out.astype(complex)
        return complex(out[0]) if single else out

    def sample_displacement(self, rng, size=None):
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        rad = self.radius * rng.random(n) ** (1.0 / self.dim)
        out = z * rad[:, None]
        return out[0] if size is None else out


def ball_average_phase(dim, x):
    """Average of exp(i <p, u>) over the unit-radius ball, as a function of x = |p| R.

    Gamma(d/2 + 1) (2/x)^(d/2) J_{d/2}(x), with a Taylor branch near 0.
    """
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    small = x < 1e-3
    xs = x[small]
    out[small] = 1.0 - xs ** 2 / (2 * (dim + 2)) + xs ** 4 / (8 * (dim + 2) * (dim + 4))
    xl = x[~small]
    nu = dim / 2
    out[~small] = special.gamma(nu + 1) * (2.0 / xl) ** nu * special.jv(nu, xl)
    return out


def _trap_weights(axis):
    w = np.empty_like(axis)
    d = np.diff(axis)
    w[0] = d[0] / 2
    w[-1] = d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


@dataclass(frozen=True, eq=False)
class Tabulated(DispersalKernel):
    """Density tabulated on a rectilinear grid, multilinear in between.

    Moments and the characteristic function use the trapezoidal rule on the
    tabulation grid; their accuracy is whatever that grid affords.
    """

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != tuple(a.size for a in axes):
            raise ValueError("values shape does not match the axes")
        if any(a.size < 2 or np.any(np.diff(a) <= 0) for a in axes):
            raise ValueError("each axis needs >= 2 strictly increasing points")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("tabulated density must be finite and nonnegative")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", vals)
        weights = _trap_weights(axes[0])
        for a in axes[1:]:
            weights = np.multiply.outer(weights, _trap_weights(a))
        object.__setattr__(self, "_qw", weights * vals)
        grids = np.meshgrid(*axes, indexing="ij")
        object.__setattr__(self, "_nodes", np.stack([g.ravel() for g in grids], axis=1))
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            axes, vals, method="linear", bounds_error=False, fill_value=0.0))
        # cell masses of the multilinear interpolant, for exact sampling
        corners = vals
        for ax in range(len(axes)):
            sl_lo = [slice(None)] * len(axes)
            sl_hi = [slice(None)] * len(axes)
            sl_lo[ax] = slice(None, -1)
            sl_hi[ax] = slice(1, None)
            corners = 0.5 * (corners[tuple(sl_lo)] + corners[tuple(sl_hi)])
        vol = np.ones(corners.shape)
        for ax, a in enumerate(axes):
            shape = [1] * len(axes)
            shape[ax] = -1
            vol = vol * np.diff(a).reshape(shape)
        cell_mass = (corners * vol).ravel()
        object.__setattr__(self, "_cell_cdf", np.cumsum(cell_mass) / cell_mass.sum())

    @property
    def dim(self):
        return len(self.axes)

    @property
    def isotropic(self):
        return False

    def mass(self):
        return float(self._qw.sum())

    @property
    def mean(self):
        return (self._qw.ravel() @ self._nodes) / self.mass()

    @property
    def covariance(self):
        mu = self.mean
        x = self._nodes - mu
        return (x * self._qw.ravel()[:, None]).T @ x / self.mass()

    def second_moment(self):
        return float(self._qw.ravel() @ (self._nodes ** 2).sum(1))

    def density(self, u):
        u, single = _as_points(u, self.dim)
        out = self._interp(u)
        return float(out[0]) if single else out

    def char_fn(self, p):
        p, single = _as_points(p, self.dim)
        w = self._qw.ravel()
        out = np.empty(p.shape[0], dtype=complex)
        chunk = max(1, 2_000_000 // max(1, w.size))
        for i in range(0, p.shape[0], chunk):
            out[i:i + chunk] = np.exp(1j * p[i:i + chunk] @ self._nodes.T) @ w
        if single:
            return complex(out[0])
        return out

    def sample_displacement(self, rng, size=None):
        n = 1 if size is None else int(size)
        shape = tuple(a.size - 1 for a in self.axes)
        out = np.empty((n, self.dim))
        vmax_cache = {}
        filled = 0
        while filled < n:
            m = n - filled
            cells = np.searchsorted(self._cell_cdf, rng.random(m), side="right")
            cells = np.minimum(cells, self._cell_cdf.size - 1)
            idx = np.unravel_index(cells, shape)
            lo = np.stack([a[i] for a, i in zip(self.axes, idx)], axis=1)
            hi = np.stack([a[i + 1] for a, i in zip(self.axes, idx)], axis=1)
            pts = lo + (hi - lo) * rng.random((m, self.dim))
            # rejection against the largest corner value of each cell
            bound = np.empty(m)
            for k, c in enumerate(cells):
                if c not in vmax_cache:
                    sl = tuple(slice(i[k], i[k] + 2) for i in idx)
                    vmax_cache[c] = self.values[sl].max()
                bound[k] = vmax_cache[c]
            keep = rng.random(m) * bound <= self._interp(pts)
            got = pts[keep]
            out[filled:filled + got.shape[0]] = got
            filled += got.shape[0]
        return out[0] if size is None else out


def load_tabulated_csv(path):
    """Read a tabulated density: one row per grid point, coordinates then value.

    Lines starting with ``#`` are ignored; an optional header row of
    non-numeric labels is skipped.
    """
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if rows:
                    raise
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: need coordinate columns plus one density column")
    coords, vals = data[:, :-1], data[:, -1]
    axes = tuple(np.unique(coords[:, k]) for k in range(coords.shape[1]))
    shape = tuple(a.size for a in axes)
    if np.prod(shape) != vals.size:
        raise ValueError(f"{path}: points do not form a complete rectilinear grid")
    index = tuple(np.searchsorted(a, coords[:, k]) for k, a in enumerate(axes))
    grid = np.zeros(shape)
    grid[index] = vals
    return Tabulated(axes=axes, values=grid)


@dataclass
class ValidationReport:
    """Pass/fail of the standing assumptions on alpha, with measured values."""

    checks: dict

    @property
    def passed(self):
        return all(ok for ok, _ in self.checks.values())

    def failures(self):
        return [name for name, (ok, _) in self.checks.items() if not ok]


def validate(kernel, grid, mass_tol=1e-3, det_tol=1e-10):
    """Check normalization, moments, non-degeneracy and |alpha_hat| < 1.

    ``grid`` is anything with a ``points()`` method returning the nonzero
    momenta to probe (a `qscontact.stationary.MomentumGrid`).  Failures are
    reported, never raised.
    """
    checks = {}
    mass = kernel.mass()
    checks["mass"] = (abs(mass - 1.0) <= mass_tol, mass)
    m2 = kernel.second_moment()
    checks["second_moment"] = (bool(np.isfinite(m2)), m2)
    cov = np.atleast_2d(kernel.covariance)
    eig = np.linalg.eigvalsh(cov)
    scale = max(1.0, float(np.abs(eig).max()))
    checks["covariance"] = (bool(eig.min() > det_tol * scale), float(np.linalg.det(cov)))
    p = grid.points()
    amax = float(np.max(np.abs(kernel.char_fn(p)))) if p.size else 0.0
    checks["char_fn_below_one"] = (amax < 1.0, amax)
    return ValidationReport(checks)
