"""Time-dependent correlations approaching the stationary pair function.

Evolves the coupled first/second-order equations from the Poisson start on
the Perron vector and prints the distance to the stationary solution.  The
approach is slow: near zero momentum the modes relax diffusively, so in
the continuum the distance decays roughly like t^(-1/2).  On a grid the
smallest nonzero momentum eventually sets an exponential tail, so coarse
grids look faster than finer ones; compare ``--points 33`` with
``--points 65``.

    python demos/hierarchy_approach.py [--t-end 20]
"""
import argparse

import numpy as np

from qscontact import (Gaussian, MarkKernel, MarkSpace, MomentumGrid, convergence_report,
                       evolve_k2, leading_eigen, solve_pair)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-end", type=float, default=20.0)
    ap.add_argument("--points", type=int, default=33)
    args = ap.parse_args()

    kernel = MarkKernel(MarkSpace(np.array([0.5, 0.5])), np.array([[2.0, 1.0], [1.0, 2.0]]))
    eig = leading_eigen(kernel)
    disp = Gaussian(3, 1.0)
    grid = MomentumGrid(3, 8.0, args.points)
    times = [t for t in (1.0, 2.0, 5.0, 10.0, 20.0, 40.0) if t <= args.t_end]
    traj = evolve_k2(kernel, disp, grid, eig.kappa_cr, rho=1.0, h=eig.q,
                     t_end=args.t_end, sample_times=times)
    conv = convergence_report(traj, solve_pair(kernel, eig, disp, 1.0, grid))
    print("   t    distance   distance*sqrt(t)")
    for t, d in zip(conv.times, conv.distances):
        print(f"{t:5.1f}  {d:.4e}  {d * np.sqrt(t):.4f}")


if __name__ == "__main__":
    main()
