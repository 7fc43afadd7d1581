"""Stationary first and second correlation functions on a momentum grid.

Translation invariance reduces the pair function to k2(w; s1, s2) with
w = x1 - x2.  With the transform k_hat(p) = int exp(i <p, w>) k(w) dw, the
order-2 stationary equation decouples into one K^2 x K^2 linear system per
momentum p:

    A(p) k_hat(p) = f_hat(p),
    A(p) k = (m_i + m_j) k_ij - a(p) (B k)_ij - a(-p) (k B^T)_ij,
    f_hat(p)_ij = kappa [k1_j a(p) Q_ij + k1_i a(-p) Q_ji],

with a = alpha_hat, B = kappa Q diag(nu) and k1 = rho q.  A(0) is singular
(q x q spans its kernel) and k_hat ~ |p|^-2 near the origin, so p = 0 is
excluded from every grid and the constant rho^2 q x q is added back
analytically.

Real-space reconstruction subtracts the pole explicitly when alpha is
symmetric: the residue along q x q is matched by
c * 2 exp(-<p,Cp>/2) / <p,Cp>, whose inverse transform is known in closed
form; the smooth remainder is summed on the lattice with the trapezoidal
rule, which is spectrally accurate.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, signal, special

from .dispersal import ball_average_phase, ball_volume

__all__ = [
    "CriticalityError",
    "SingularModeError",
    "NearSingularWarning",
    "AliasingWarning",
    "MomentumGrid",
    "PairGrid",
    "solve_k1",
    "markless_pair_hat",
    "pair_forcing",
    "apply_pair_operator",
    "solve_pair_mode",
    "solve_pair",
    "assemble_pair_real",
    "shell_average",
    "stationarity_residual",
    "pair_bound",
    "criticality_integral",
    "CriticalityReport",
    "pole_profile",
    "write_pair_modes_csv",
    "write_pair_slice_csv",
]

_CHUNK = 32768


class CriticalityError(ValueError):
    """The branching rate is not critical (kappa * r != 1)."""


class SingularModeError(ValueError):
    """A solve was requested at the singular momentum p = 0."""


class NearSingularWarning(RuntimeWarning):
    pass


class AliasingWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MomentumGrid:
    """Symmetric cubic lattice of momenta with the origin removed.

    Points run over ``linspace(-extent, extent, points_per_axis)`` in each
    of ``dim`` axes, lexicographically ordered.  Because the lattice is
    point-symmetric, mode ``i`` and mode ``size - 1 - i`` are negatives of
    each other.
    """

    dim: int = 3
    extent: float = 8.0
    points_per_axis: int = 65

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.points_per_axis < 3 or self.points_per_axis % 2 == 0:
            raise ValueError("points_per_axis must be odd and >= 3")
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    @classmethod
    def torus(cls, dim, length, extent=8.0):
        """Lattice of the torus [0, length)^dim truncated at ``extent``.

        Spacing 2 pi / length, so the Riemann sum of the inverse transform is
        exactly the Fourier series on the torus.
        """
        dp = 2 * np.pi / length
        half = max(1, int(np.floor(extent / dp + 1e-9)))
        return cls(dim=dim, extent=half * dp, points_per_axis=2 * half + 1)

    @property
    def spacing(self):
        return 2.0 * self.extent / (self.points_per_axis - 1)

    @property
    def weight(self):
        """Quadrature weight h^d / (2 pi)^d of one mode in the inverse transform."""
        return (self.spacing / (2 * np.pi)) ** self.dim

    @property
    def size(self):
        return self.points_per_axis ** self.dim - 1

    @property
    def resolvable(self):
        """Largest |w_k| before the lattice sum aliases (half its period)."""
        return np.pi / self.spacing

    def axis(self):
        return np.linspace(-self.extent, self.extent, self.points_per_axis)

    @cached_property
    def _points(self):
        n = self.points_per_axis
        half = (n - 1) // 2
        ints = np.stack(np.meshgrid(*([np.arange(-half, half + 1)] * self.dim),
                                    indexing="ij"), axis=-1).reshape(-1, self.dim)
        centre = (ints.shape[0] - 1) // 2
        ints = np.delete(ints, centre, axis=0)
        ints.setflags(write=False)
        pts = ints * self.spacing
        pts.setflags(write=False)
        return ints, pts

    def points(self):
        return self._points[1]

    def integer_points(self):
        return self._points[0]

    def negated(self):
        """Permutation mapping mode i to the mode at -p_i."""
        return np.arange(self.size)[::-1]

    def index_of(self, n_vec):
        """Mode index of the lattice point with integer coordinates ``n_vec``."""
        n = self.points_per_axis
        half = (n - 1) // 2
        flat = 0
        for c in n_vec:
            if abs(c) > half:
                raise IndexError(f"{n_vec} outside the grid")
            flat = flat * n + (c + half)
        centre = (n ** self.dim - 1) // 2
        if flat == centre:
            raise SingularModeError("p = 0 is not a grid mode")
        return flat - 1 if flat > centre else flat


def _kron_sum_parts(B):
    K = B.shape[0]
    eye = np.eye(K)
    return np.kron(B, eye), np.kron(eye, B)


def _kappa_of(eigen, kappa):
    return eigen.kappa_cr if kappa is None else float(kappa)


def solve_k1(kernel, eigen, rho, kappa=None, tol=1e-9):
    """Stationary density k1 = rho q, checked against -m k1 + kappa Q k1 = 0.

    Raises `CriticalityError` if ``kappa`` is supplied and kappa * r differs
    from 1 by more than ``tol``.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    kappa_ = _kappa_of(eigen, kappa)
    if abs(kappa_ * eigen.r - 1.0) > tol:
        raise CriticalityError(
            f"kappa * r = {kappa_ * eigen.r:.12g}; no positive bounded stationary density")
    k1 = rho * eigen.q
    resid = kappa_ * (kernel.operator() @ k1) - kernel.mortality * k1
    if np.max(np.abs(resid)) > 10 * tol * max(1.0, np.max(np.abs(k1))):
        raise CriticalityError(f"stationary density residual {np.max(np.abs(resid)):.3e}")
    return k1


def markless_pair_hat(dispersal, rho, p):
    """Closed-form pair transform of the markless critical model, p != 0.

    rho (a(p) + a(-p)) / (2 - a(p) - a(-p)); the delta term at p = 0 is
    carried separately as the constant rho^2.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(np.all(p == 0.0, axis=1)):
        raise SingularModeError("markless pair transform is singular at p = 0")
    s = np.real(np.atleast_1d(dispersal.char_fn(p)) + np.atleast_1d(dispersal.char_fn(-p)))
    out = rho * s / (2.0 - s)
    return float(out[0]) if single else out


def pair_forcing(kernel, kappa, k1, ahat_p, ahat_m):
    """Transform of the order-2 source term for density k1, shape (M, K, K)."""
    q = kernel.q_matrix
    k1 = np.asarray(k1, dtype=float)
    ahat_p = np.asarray(ahat_p)[..., None, None]
    ahat_m = np.asarray(ahat_m)[..., None, None]
    return kappa * (ahat_p * (q * k1[None, :]) + ahat_m * (q.T * k1[:, None]))


def apply_pair_operator(kernel, kappa, ahat_p, ahat_m, k):
    """A(p) k for stacked mode values ``k`` of shape (M, K, K).

    A = -L*_2 in Fourier variables; the evolution generator is -A.
    """
    B = kappa * kernel.operator()
    m = kernel.mortality
    diag = m[:, None] + m[None, :]
    Bk = np.matmul(B, k)
    kB = np.matmul(k, B.T)
    return (diag * k - np.asarray(ahat_p)[..., None, None] * Bk
            - np.asarray(ahat_m)[..., None, None] * kB)


def _mode_matrices(kernel, kappa, ahat_p, ahat_m):
    B = kappa * kernel.operator()
    K = B.shape[0]
    BI, IB = _kron_sum_parts(B)
    m = kernel.mortality
    D = np.diag((m[:, None] + m[None, :]).ravel())
    return (D[None] - ahat_p[:, None, None] * BI[None]
            - ahat_m[:, None, None] * IB[None]).reshape(-1, K * K, K * K)


def _char_pair(dispersal, p):
    ap = np.atleast_1d(dispersal.char_fn(p))
    if dispersal.symmetric:
        am = ap
    else:
        am = np.atleast_1d(dispersal.char_fn(-p))
    return ap, am


def _solve_modes(kernel, kappa, k1, ahat_p, ahat_m):
    M = ahat_p.shape[0]
    K = kernel.space.size
    out = np.empty((M, K, K), dtype=complex)
    for lo in range(0, M, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        rhs = pair_forcing(kernel, kappa, k1, ahat_p[sl], ahat_m[sl]).reshape(-1, K * K)
        if K == 1:
            mats = _mode_matrices(kernel, kappa, ahat_p[sl], ahat_m[sl])[:, 0, 0]
            out[sl, 0, 0] = rhs[:, 0] / mats
        else:
            mats = _mode_matrices(kernel, kappa, ahat_p[sl], ahat_m[sl])
            out[sl] = np.linalg.solve(mats, rhs[..., None])[..., 0].reshape(-1, K, K)
    return out


def solve_pair_mode(kernel, eigen, dispersal, rho, p, kappa=None):
    """Solve the order-2 stationary system at a single momentum p != 0.

    Returns the K x K complex matrix k_hat(p; s1, s2).
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (dispersal.dim,):
        raise ValueError(f"p must be a {dispersal.dim}-vector")
    if np.all(p == 0.0):
        raise SingularModeError("the pair system is singular at p = 0")
    kappa_ = _kappa_of(eigen, kappa)
    k1 = solve_k1(kernel, eigen, rho, kappa_)
    ap, am = _char_pair(dispersal, p[None, :])
    mat = _mode_matrices(kernel, kappa_, ap, am)[0]
    cond = np.linalg.cond(mat)
    if cond > 1e12:
        warnings.warn(f"mode system near singular at |p|={np.linalg.norm(p):.3e}, "
                      f"condition number {cond:.3e}", NearSingularWarning, stacklevel=2)
    return _solve_modes(kernel, kappa_, k1, ap, am)[0]


@dataclass
class PairGrid:
    """Pair correlation transform on a momentum grid plus its constant part.

    ``values[i]`` is k_hat(p_i; ., .).  Real space is
    ``constant_term + inverse transform`` (see `assemble_pair_real`).
    ``zero_mode`` holds a finite p = 0 coefficient for torus lattices, where
    it is part of the Fourier series; it is ``None`` on continuum grids.
    """

    grid: MomentumGrid
    kernel: object
    dispersal: object
    rho: float
    kappa: float
    k1: np.ndarray
    values: np.ndarray
    constant_term: np.ndarray
    time: float | None = None
    zero_mode: np.ndarray | None = None
    pole: dict | None = field(default=None, repr=False)

    @property
    def stationary(self):
        return self.time is None

    @property
    def marks(self):
        return self.kernel.space

    def char_values(self):
        return _char_pair(self.dispersal, self.grid.points())

    def copy_with(self, values, time=None, constant_term=None, zero_mode=None):
        return PairGrid(self.grid, self.kernel, self.dispersal, self.rho, self.kappa,
                        self.k1, values,
                        self.constant_term if constant_term is None else constant_term,
                        time=time, zero_mode=zero_mode)


def _null_vectors(mat):
    u, s, vt = np.linalg.svd(mat)
    return vt[-1], u[:, -1], s


def pole_profile(dim, r):
    """Inverse transform of 2 exp(-|p|^2/2) / |p|^2 in ``dim`` >= 3 dimensions.

    (r^(2-d) / 2) pi^(-d/2) lowergamma(d/2 - 1, r^2 / 2), finite at r = 0.
    """
    if dim < 3:
        raise ValueError("the |p|^-2 pole is not integrable for dim < 3")
    r = np.asarray(r, dtype=float)
    a = dim / 2 - 1
    out = np.empty_like(r)
    small = r < 1e-8
    out[small] = 2 * (4 * np.pi) ** (-dim / 2) * 0.5 ** (1 - dim / 2) / a
    rl = r[~small]
    out[~small] = (0.5 * rl ** (2 - dim) * np.pi ** (-dim / 2)
                   * special.gamma(a) * special.gammainc(a, rl ** 2 / 2))
    return out


def _pole_data(kernel, kappa, k1, dispersal, grid, values):
    """Residue of the |p|^-2 pole and the p -> 0 limit of the remainder."""
    K = kernel.space.size
    B = kappa * kernel.operator()
    m = kernel.mortality
    # right/left null vectors of diag(m) - B; the pair kernel is their tensor square
    right, left, s = _null_vectors(np.diag(m) - B)
    if s[-1] > 1e-8 * s[0]:
        return None
    r_vec = np.kron(right, right)
    l_vec = np.kron(left, left)
    BI, IB = _kron_sum_parts(B)
    f0 = pair_forcing(kernel, kappa, k1, np.ones(1), np.ones(1))[0].ravel()
    coef = np.outer(r_vec, l_vec) @ f0 / (l_vec @ (BI + IB) @ r_vec)
    coef = coef.reshape(K, K)
    cov = np.atleast_2d(dispersal.covariance)
    pts = grid.points()
    quad = np.einsum("ni,ij,nj->n", pts, cov, pts)
    g = 2 * np.exp(-quad / 2) / quad
    pole = {"coef": coef, "cov": cov, "g": g}
    # remainder at p = 0: Richardson extrapolation of axis-neighbour averages
    # at h, 2h, 3h, cancelling the h^2 and h^4 terms
    steps, coeffs = {7: ((1, 2, 3), (1.5, -0.6, 0.1)), 5: ((1, 2), (4 / 3, -1 / 3))}.get(
        min(grid.points_per_axis, 7), ((), ()))
    if steps:
        avg = []
        for step in steps:
            acc = np.zeros((K, K), dtype=complex)
            for ax in range(grid.dim):
                for sign in (1, -1):
                    n_vec = [0] * grid.dim
                    n_vec[ax] = sign * step
                    i = grid.index_of(n_vec)
                    acc += values[i] - coef * g[i]
            avg.append(acc / (2 * grid.dim))
        pole["remainder0"] = np.real(sum(c * a for c, a in zip(coeffs, avg)))
    else:
        pole["remainder0"] = np.zeros((K, K))
    return pole


def solve_pair(kernel, eigen, dispersal, rho, grid, kappa=None):
    """Solve the stationary order-2 system at every grid mode.

    Parameters
    ----------
    kernel : MarkKernel
    eigen : EigenData
        Perron data of ``kernel`` (rescaled when mortality is not constant).
    dispersal : DispersalKernel
    rho : float
        Density parameter; k1 = rho q.
    grid : MomentumGrid
    kappa : float, optional
        Defaults to the critical value of ``eigen``.

    Returns
    -------
    PairGrid
    """
    if grid.dim != dispersal.dim:
        raise ValueError("grid and dispersal dimensions differ")
    kappa_ = _kappa_of(eigen, kappa)
    k1 = solve_k1(kernel, eigen, rho, kappa_)
    pts = grid.points()
    ap, am = _char_pair(dispersal, pts)
    denom = 2.0 - np.real(ap + am)
    if np.any(denom <= 0):
        raise ValueError("2 - a(p) - a(-p) must be positive at every p != 0; "
                         "is the dispersal covariance degenerate?")
    near = np.argsort(np.einsum("ij,ij->i", pts, pts))[:2 * grid.dim]
    conds = np.linalg.cond(_mode_matrices(kernel, kappa_, ap[near], am[near]))
    if np.max(conds) > 1e12:
        warnings.warn(f"mode systems near p = 0 have condition number {np.max(conds):.3e}",
                      NearSingularWarning, stacklevel=2)
    values = _solve_modes(kernel, kappa_, k1, ap, am)
    pair = PairGrid(grid, kernel, dispersal, float(rho), kappa_, k1, values,
                    np.outer(k1, k1))
    if dispersal.symmetric and grid.dim >= 3:
        pair.pole = _pole_data(kernel, kappa_, k1, dispersal, grid, values)
    return pair


def _pole_real(pole, dim, w):
    cov = pole["cov"]
    vals, vecs = np.linalg.eigh(cov)
    white = (w @ vecs) / np.sqrt(vals)
    radius = np.linalg.norm(white, axis=1)
    return pole_profile(dim, radius) / np.sqrt(np.prod(vals))


def _lattice_sum(pts, vals, w):
    """sum_p vals(p) exp(-i <p, w>) for each row of w, chunked over modes."""
    flat = vals.reshape(vals.shape[0], -1)
    acc = np.zeros((w.shape[0], flat.shape[1]), dtype=complex)
    for lo in range(0, pts.shape[0], _CHUNK):
        phase = np.exp(-1j * (w @ pts[lo:lo + _CHUNK].T))
        acc += phase @ flat[lo:lo + _CHUNK]
    return acc.reshape((w.shape[0],) + vals.shape[1:])


def assemble_pair_real(pair, w):
    """Real-space pair correlation k2(w; s1, s2).

    Constant ``rho^2 q x q`` plus the Riemann-sum inverse transform of the
    mode values.  For stationary grids with a symmetric kernel the
    |p|^-2 pole is handled analytically (see module docstring).

    ``w`` is a d-vector (returns K x K) or an (n, d) array (returns
    (n, K, K)).  Separations beyond half the lattice period trigger an
    `AliasingWarning`.
    """
    grid = pair.grid
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    if w.shape[1] != grid.dim:
        raise ValueError(f"separations must be {grid.dim}-vectors")
    if np.any(np.abs(w) >= grid.resolvable):
        warnings.warn(f"separations beyond {grid.resolvable:.3g} alias on this grid",
                      AliasingWarning, stacklevel=2)
    vals = pair.values
    pole = pair.pole if pair.stationary else None
    if pole is not None:
        vals = vals - pole["coef"][None] * pole["g"][:, None, None]
    out = np.real(_lattice_sum(grid.points(), vals, w)) * grid.weight
    out += pair.constant_term[None]
    if pole is not None:
        out += pole["coef"][None] * _pole_real(pole, grid.dim, w)[:, None, None]
        out += pole["remainder0"][None] * grid.weight
    if pair.zero_mode is not None:
        out += np.real(pair.zero_mode)[None] * grid.weight
    return out[0] if single else out


def _pole_shell(pole, dim, a, b):
    vals = np.linalg.eigvalsh(pole["cov"])
    if not np.allclose(vals, vals[0]):
        raise NotImplementedError("shell averages of the pole need an isotropic kernel")
    sigma = np.sqrt(vals[0])
    area = dim * ball_volume(dim)

    def integrand(r):
        return pole_profile(dim, np.array([r / sigma]))[0] * area * r ** (dim - 1)

    val = integrate.quad(integrand, a, b, limit=200, epsabs=0, epsrel=1e-12)[0]
    return val / sigma ** dim / (ball_volume(dim, b) - ball_volume(dim, a))


def shell_average(pair, edges):
    """Average of k2 over spherical shells edges[k] <= |w| < edges[k+1].

    Uses the exact ball average of each Fourier mode, so the result is the
    quantity a pair-counting estimator with the same bins measures.
    Returns an array of shape (len(edges) - 1, K, K).
    """
    grid = pair.grid
    edges = np.asarray(edges, dtype=float)
    pts = grid.points()
    pn = np.linalg.norm(pts, axis=1)
    d = grid.dim
    vals = pair.values
    pole = pair.pole if pair.stationary else None
    if pole is not None:
        vals = vals - pole["coef"][None] * pole["g"][:, None, None]
    flat = vals.reshape(vals.shape[0], -1)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        va, vb = ball_volume(d, a), ball_volume(d, b)
        wgt = (vb * ball_average_phase(d, pn * b) - va * ball_average_phase(d, pn * a)) / (vb - va)
        shell = np.real(wgt @ flat).reshape(pair.constant_term.shape) * grid.weight
        shell = shell + pair.constant_term
        if pole is not None:
            shell = shell + pole["coef"] * _pole_shell(pole, d, a, b)
            shell = shell + pole["remainder0"] * grid.weight
        if pair.zero_mode is not None:
            shell = shell + np.real(pair.zero_mode) * grid.weight
        out.append(shell)
    return np.array(out)


def stationarity_residual(pair):
    """Residuals of the discretized stationary equation on the grid.

    Returns a dict with the largest mode-wise residual ``sup``, the
    real-space bound ``l1`` (sum of mode residuals times the quadrature
    weight), and ``constant`` = |A(0) rho^2 q x q|, which must vanish.
    """
    ap, am = pair.char_values()
    kernel = pair.kernel
    lhs = apply_pair_operator(kernel, pair.kappa, ap, am, pair.values)
    rhs = pair_forcing(kernel, pair.kappa, pair.k1, ap, am)
    res = np.abs(lhs - rhs)
    const = apply_pair_operator(kernel, pair.kappa, np.ones(1), np.ones(1),
                                pair.constant_term[None].astype(complex))
    return {
        "sup": float(res.max()),
        "l1": float(res.max(axis=(1, 2)).sum() * pair.grid.weight),
        "constant": float(np.abs(const).max()),
    }


def pair_bound(pair, w):
    """Smallest B with k2(w; s1, s2) <= B q(s1) q(s2) over the given separations."""
    k = assemble_pair_real(pair, w)
    q = pair.k1 / pair.rho
    return float(np.max(k / np.outer(q, q)[None]))


@dataclass
class CriticalityReport:
    """Refinement sequence of the lattice quadrature of |a| / (2 - a(p) - a(-p))."""

    dim: int
    extent: float
    points: list
    spacings: list
    values: list

    @property
    def relative_changes(self):
        v = np.asarray(self.values)
        return list((v[1:] - v[:-1]) / v[:-1])

    @property
    def last_change(self):
        return self.relative_changes[-1]

    @property
    def total_growth(self):
        return (self.values[-1] - self.values[0]) / self.values[0]

    @property
    def increment_ratios(self):
        """Ratios of successive increments: ~1/2 for d=3, ~1 for d=2, ~2 for d=1 under halving."""
        inc = np.diff(self.values)
        return list(inc[1:] / inc[:-1])

    def converged(self, tol=0.01):
        return abs(self.last_change) < tol

    def diverging(self, growth=0.2):
        return bool(self.total_growth > growth and np.all(np.diff(self.values) > 0))


def _criticality_sum(dispersal, dim, extent, n):
    axis = np.linspace(-extent, extent, n)
    h = axis[1] - axis[0]
    half = (n - 1) // 2
    rest = np.stack(np.meshgrid(*([axis] * (dim - 1)), indexing="ij"), axis=-1).reshape(
        -1, dim - 1) if dim > 1 else np.zeros((1, 0))
    total = 0.0
    # p -> -p symmetry of the integrand: slices below the centre count twice
    for i in range(half + 1):
        pts = np.empty((rest.shape[0], dim))
        pts[:, 0] = axis[i]
        pts[:, 1:] = rest
        ap, am = _char_pair(dispersal, pts)
        num = np.abs(ap)
        den = 2.0 - np.real(ap + am)
        if i == half:
            centre = rest.shape[0] // 2
            num[centre] = 0.0
            den[centre] = 1.0
            total += np.sum(num / den)
        else:
            total += 2 * np.sum(num / den)
    return total * h ** dim


def _shell_counts(dim, half):
    """Number of integer points n in [-half, half]^dim with |n|^2 = k, indexed by k."""
    one = np.zeros(half * half + 1)
    np.add.at(one, np.arange(-half, half + 1) ** 2, 1.0)
    counts = one
    for _ in range(dim - 1):
        counts = np.rint(signal.fftconvolve(counts, one))
    return counts


def _criticality_sum_radial(dispersal, dim, extent, n):
    half = (n - 1) // 2
    h = 2 * extent / (n - 1)
    counts = _shell_counts(dim, half)
    k = np.nonzero(counts)[0]
    k = k[k > 0]
    pts = np.zeros((k.size, dim))
    pts[:, 0] = h * np.sqrt(k)
    ap, am = _char_pair(dispersal, pts)
    return float(np.sum(counts[k] * np.abs(ap) / (2.0 - np.real(ap + am))) * h ** dim)


def criticality_integral(dispersal, extent=8.0, refinements=(65, 129, 257, 513, 1025)):
    """Lattice quadrature of int |a(p)| / (2 - a(p) - a(-p)) dp with p = 0 removed.

    The value is finite only for d >= 3; refining the lattice makes the
    difference observable (d = 3 settles, lower dimensions keep growing).
    Isotropic kernels are summed shell by shell over exact lattice-point
    counts per |n|^2, which is the same lattice sum at far lower cost.
    """
    dim = dispersal.dim
    pts, hs, vals = [], [], []
    for n in refinements:
        if n % 2 == 0 or n < 3:
            raise ValueError("refinements must be odd point counts >= 3")
        pts.append(int(n))
        hs.append(2 * extent / (n - 1))
        summer = _criticality_sum_radial if dispersal.isotropic else _criticality_sum
        vals.append(float(summer(dispersal, dim, extent, n)))
    return CriticalityReport(dim, extent, pts, hs, vals)


def _fmt(x):
    return repr(float(x))


def write_pair_modes_csv(pair, path):
    """One row per (mode, s1, s2): index, momentum components, marks, Re, Im."""
    pts = pair.grid.points()
    K = pair.marks.size
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["mode"] + [f"p{k}" for k in range(pair.grid.dim)]
                    + ["s1", "s2", "re", "im"])
        for i in range(pts.shape[0]):
            head = [i] + [_fmt(x) for x in pts[i]]
            for a in range(K):
                for b in range(K):
                    v = pair.values[i, a, b]
                    wr.writerow(head + [a, b, _fmt(v.real), _fmt(v.imag)])


def write_pair_slice_csv(pair, direction, distances, path):
    """Real-space k2 along a ray: distance column then one column per mark pair."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    distances = np.asarray(distances, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AliasingWarning)
        k = assemble_pair_real(pair, distances[:, None] * direction[None, :])
    K = pair.marks.size
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["distance"] + [f"k_{a}_{b}" for a in range(K) for b in range(K)])
        for r, kk in zip(distances, k):
            wr.writerow([_fmt(r)] + [_fmt(x) for x in kk.ravel()])
