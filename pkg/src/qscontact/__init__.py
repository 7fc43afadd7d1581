"""Critical marked contact model: spectra, stationary correlations, hierarchy, simulation."""

__version__ = "0.1.0"

from .dispersal import Gaussian, Tabulated, UniformBall, validate
from .hierarchy import convergence_report, evolve_k1, evolve_k2
from .marks import MarkKernel, MarkSpace, asymptotic_density, leading_eigen
from .simulator import PoissonStart, SimParams, run
from .stationary import MomentumGrid, criticality_integral, solve_k1, solve_pair

__all__ = [
    "Gaussian", "Tabulated", "UniformBall", "validate",
    "convergence_report", "evolve_k1", "evolve_k2",
    "MarkKernel", "MarkSpace", "asymptotic_density", "leading_eigen",
    "PoissonStart", "SimParams", "run",
    "MomentumGrid", "criticality_integral", "solve_k1", "solve_pair",
]
