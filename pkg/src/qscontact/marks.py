"""Mark space quadrature, mutation kernels and their Perron eigenstructure.

The mark space S is represented by K quadrature nodes with positive weights
nu_1..nu_K.  Every integral over S becomes a weighted sum, so the mutation
operator

    (Q h)(s_i) = sum_j Q(s_i, s_j) h_j nu_j

is the K x K matrix ``Q * nu[None, :]`` acting on nodal values.  With
species-dependent mortality m the rescaled operator divides row i by m_i.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConvergenceError",
    "MarkSpace",
    "MarkKernel",
    "EigenData",
    "apply_kernel",
    "leading_eigen",
    "asymptotic_density",
    "eigen_convergence_in_k",
]


class ConvergenceError(RuntimeError):
    """Power iteration did not reach the requested residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class MarkSpace:
    """K marks with quadrature weights of the measure nu."""

    weights: np.ndarray
    labels: tuple = ()
    nodes: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or w.size < 1:
            raise ValueError("mark weights must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("mark weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        labels = tuple(self.labels) if len(self.labels) else tuple(range(w.size))
        if len(labels) != w.size:
            raise ValueError(f"{len(labels)} labels for {w.size} weights")
        object.__setattr__(self, "labels", labels)
        if self.nodes is not None:
            nodes = np.asarray(self.nodes, dtype=float)
            if nodes.shape[0] != w.size:
                raise ValueError("one node per weight required")
            object.__setattr__(self, "nodes", nodes)

    @property
    def size(self):
        return self.weights.size

    @property
    def total_mass(self):
        return float(self.weights.sum())

    def integrate(self, h):
        return float(np.dot(np.asarray(h, dtype=float), self.weights))

    @classmethod
    def single(cls):
        """One-point mark space with unit mass (the markless model)."""
        return cls(weights=np.ones(1), labels=("*",), nodes=np.zeros(1))

    @classmethod
    def uniform_grid(cls, count, lower=0.0, upper=1.0):
        """Midpoint rule on [lower, upper] with ``count`` nodes."""
        if count < 1:
            raise ValueError("count must be >= 1")
        width = (upper - lower) / count
        nodes = lower + width * (np.arange(count) + 0.5)
        return cls(weights=np.full(count, width), nodes=nodes,
                   labels=tuple(f"{x:.6g}" for x in nodes))


@dataclass(frozen=True)
class MarkKernel:
    """Mutation kernel Q(s_i, s_j) on the nodes plus per-mark mortality."""

    space: MarkSpace
    q_matrix: np.ndarray
    mortality: np.ndarray | None = None

    def __post_init__(self):
        K = self.space.size
        q = np.asarray(self.q_matrix, dtype=float)
        if q.shape != (K, K):
            raise ValueError(f"q_matrix has shape {q.shape}, expected {(K, K)}")
        if not np.all(np.isfinite(q)) or np.any(q <= 0):
            raise ValueError("mutation kernel must be strictly positive")
        m = np.ones(K) if self.mortality is None else np.asarray(self.mortality, dtype=float)
        if m.shape != (K,):
            raise ValueError(f"mortality has shape {m.shape}, expected {(K,)}")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValueError("mortality must be strictly positive")
        q.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "q_matrix", q)
        object.__setattr__(self, "mortality", m)

    @property
    def homogeneous(self):
        return bool(np.all(self.mortality == 1.0))

    def operator(self, rescaled=False):
        """Matrix of the integral operator acting on nodal values."""
        mat = self.q_matrix * self.space.weights[None, :]
        if rescaled:
            mat = mat / self.mortality[:, None]
        return mat

    def adjoint_operator(self, rescaled=False):
        """Matrix of the operator with kernel Q*(s, s') = Q(s', s)."""
        q = self.q_matrix / self.mortality[:, None] if rescaled else self.q_matrix
        return q.T * self.space.weights[None, :]

    def scaled(self, factor):
        return MarkKernel(self.space, self.q_matrix * factor, self.mortality)

    @classmethod
    def from_form(cls, space, form, mortality=None, **params):
        """Evaluate a named closed-form kernel at the mark nodes.

        ``"uniform"``: Q = ``value`` everywhere (default 1).
        ``"exponential"``: Q(s, s') = ``amplitude`` * exp(-|s - s'| / ``length``)
        on the node coordinates (default amplitude 1, length 0.25).
        """
        K = space.size
        if form == "uniform":
            q = np.full((K, K), float(params.get("value", 1.0)))
        elif form == "exponential":
            if space.nodes is None:
                raise ValueError("exponential kernel needs mark nodes")
            x = np.asarray(space.nodes, dtype=float).reshape(K, -1)
            dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
            q = float(params.get("amplitude", 1.0)) * np.exp(
                -dist / float(params.get("length", 0.25)))
        else:
            raise ValueError(f"unknown kernel form {form!r}")
        return cls(space, q, mortality)


@dataclass(frozen=True)
class EigenData:
    """Leading eigenpair data of Q (or of Q/m when ``rescaled``).

    ``q`` is normalized so that sum(q * nu) = 1; ``q_adj`` is the positive
    eigenfunction of the adjoint kernel with the same normalization.
    """

    r: float
    q: np.ndarray
    q_adj: np.ndarray
    kappa_cr: float
    spectral_gap: float | None = None
    rescaled: bool = False
    mortality: np.ndarray = field(default=None, repr=False)
    iterations: int = 0
    residual: float = 0.0


def apply_kernel(kernel, h, rescaled=False):
    """Apply the mutation operator (optionally divided by mortality) to ``h``."""
    h = np.asarray(h, dtype=float)
    if h.shape != (kernel.space.size,):
        raise ValueError(f"h has shape {h.shape}, expected {(kernel.space.size,)}")
    return kernel.operator(rescaled) @ h


def _power_iterate(mat, weights, tol, max_iter):
    x = np.ones(mat.shape[0])
    r = 0.0
    residual = np.inf
    for it in range(1, max_iter + 1):
        y = mat @ x
        r = float(np.dot(x, y) / np.dot(x, x))
        # residual of the nu-normalized vector: |(A - r) x|_inf / <x, nu>
        residual = float(np.max(np.abs(y - r * x)) / np.dot(x, weights))
        if residual <= tol * r:
            break
        x = y / np.max(np.abs(y))
    else:
        raise ConvergenceError(f"power iteration stalled after {max_iter} steps", residual)
    return r, x / np.dot(x, weights), it, residual


def _second_modulus(mat, q, left, iterations=2000, window=1500):
    """Estimate |lambda_2| from norm growth of the deflated operator."""
    K = mat.shape[0]
    if K == 1:
        return 0.0
    proj = np.outer(q, left) / np.dot(left, q)
    deflated = mat - mat @ proj
    x = np.linspace(1.0, 2.0, K)
    x -= proj @ x
    logs = []
    lognorm = 0.0
    for _ in range(iterations):
        x = deflated @ x
        n = np.linalg.norm(x)
        if n == 0.0 or not np.isfinite(n):
            return 0.0
        lognorm += np.log(n)
        x /= n
        logs.append(lognorm)
    return float(np.exp((logs[-1] - logs[-1 - window]) / window))


def leading_eigen(kernel, rescaled=False, tol=1e-12, max_iter=100_000, gap=True):
    """Perron root and positive eigenfunctions of the mutation operator.

    Power iteration from the all-ones vector on the nodal matrix of Q (or
    Q/m).  Iteration stops once the nu-normalized residual
    ``|(A - r) q|_inf`` drops below ``tol * r``; the same is done for the
    adjoint kernel.

    Parameters
    ----------
    kernel : MarkKernel
    rescaled : bool
        Use Q(s, s')/m(s) (species-dependent mortality) instead of Q.
    tol : float
        Relative residual target.
    max_iter : int
        Iteration cap; exceeding it raises `ConvergenceError`.
    gap : bool
        Also estimate r - |lambda_2| by deflated power iteration.

    Returns
    -------
    EigenData
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    w = kernel.space.weights
    mat = kernel.operator(rescaled)
    r, q, it, res = _power_iterate(mat, w, tol, max_iter)
    r_adj, q_adj, it_adj, _ = _power_iterate(kernel.adjoint_operator(rescaled), w, tol, max_iter)
    if abs(r_adj - r) > 10 * tol * r:
        raise ConvergenceError("direct and adjoint Perron roots disagree", abs(r_adj - r))
    spectral_gap = None
    if gap:
        # left eigenvector of the nodal matrix is nu * q_adj
        spectral_gap = max(r - _second_modulus(mat, q, w * q_adj), 0.0)
    return EigenData(
        r=r, q=q, q_adj=q_adj, kappa_cr=1.0 / r, spectral_gap=spectral_gap,
        rescaled=rescaled, mortality=kernel.mortality.copy(),
        iterations=max(it, it_adj), residual=res,
    )


def asymptotic_density(eigen, space, rho, h, tol=1e-8):
    """Limit density reached from the marked Poisson start (rho, h).

    rho_1 = rho <h, w> / <q, w> with w = q_adj / m.  For homogeneous
    mortality w is the adjoint eigenfunction itself; with mortality the
    conserved functional of dk/dt = kappa Q k - m k carries the extra 1/m.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (space.size,):
        raise ValueError(f"h has shape {h.shape}, expected {(space.size,)}")
    if np.any(h < 0):
        raise ValueError("h must be nonnegative")
    mass = space.integrate(h)
    if abs(mass - 1.0) > tol:
        raise ValueError(f"h is not normalized: integral {mass!r} != 1")
    weight = eigen.q_adj
    if eigen.rescaled and eigen.mortality is not None:
        weight = weight / eigen.mortality
    num = np.sum(h * weight * space.weights)
    den = np.sum(eigen.q * weight * space.weights)
    return float(rho * num / den)


def eigen_convergence_in_k(make_kernel, counts, rescaled=False):
    """Perron root as a function of mark quadrature size.

    ``make_kernel(K)`` builds a kernel on a K-node quadrature.  Returns a
    list of (K, r) pairs; used to judge whether the quadrature resolves the
    continuous mark space.
    """
    return [(int(K), leading_eigen(make_kernel(int(K)), rescaled=rescaled, gap=False).r)
            for K in counts]
