"""Leading eigenpair of a two-mark kernel and relaxation of the density.

Starts all mass on the first mark, integrates the first-order equation at
the critical rate and compares the limit with the conserved-functional
prediction, then repeats the experiment with the particle simulator.

    python demos/spectrum_and_relaxation.py [--replicas 300]
"""
import argparse

import numpy as np

from qscontact import (Gaussian, MarkKernel, MarkSpace, PoissonStart, SimParams,
                       asymptotic_density, evolve_k1, leading_eigen, run)
from qscontact.simulator import estimate_density


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicas", type=int, default=300)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    kernel = MarkKernel(MarkSpace(np.array([0.5, 0.5])), np.array([[2.0, 1.0], [1.0, 2.0]]))
    eig = leading_eigen(kernel)
    print(f"r = {eig.r:.12g}, kappa_cr = {eig.kappa_cr:.12g}, gap = {eig.spectral_gap:.4g}")
    print(f"q = {eig.q}, q_adj = {eig.q_adj}")

    h = np.array([2.0, 0.0])
    rho1 = asymptotic_density(eig, kernel.space, 1.0, h)
    traj = evolve_k1(kernel, eig.kappa_cr, h, 10.0, sample_times=[1, 2, 5, 10])
    print("\n  t   density   k1 per mark")
    for t, d, v in zip(traj.times, traj.densities(), traj.values):
        print(f"{t:4.1f}  {d:.8f}  {np.array2string(v, precision=6)}")
    print(f"predicted limit rho_1 = {rho1:.8f}")

    params = SimParams(kernel, Gaussian(2, 1.0), eig.kappa_cr, 10.0, 10.0,
                       seed=args.seed, replicas=args.replicas)
    log = run(params, PoissonStart(1.0, h), sample_times=[0.0, 5.0, 10.0])
    for t in (5.0, 10.0):
        est, se = estimate_density(log, t)
        print(f"simulated density at t={t:g}: {est:.4f} +- {se:.4f}")


if __name__ == "__main__":
    main()
