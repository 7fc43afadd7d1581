import warnings

import numpy as np
import pytest
from scipy import integrate

from qscontact.dispersal import Gaussian, UniformBall
from qscontact.marks import MarkKernel, MarkSpace, leading_eigen
from qscontact.stationary import (AliasingWarning, CriticalityError, MomentumGrid,
                                  SingularModeError, assemble_pair_real, criticality_integral,
                                  markless_pair_hat, pair_bound, pole_profile, shell_average,
                                  solve_k1, solve_pair, solve_pair_mode, stationarity_residual,
                                  write_pair_modes_csv, write_pair_slice_csv)


def radial_oracle(rho, r, var=1.0):
    """Independent 1-d quadrature of the markless inverse transform in d = 3."""
    def f(p, x):
        if p < 1e-6:
            return 2 * rho * x / var
        a = np.exp(-var * p * p / 2)
        return p * rho * 2 * a / (2 - 2 * a) * np.sin(p * x)
    return np.array([rho ** 2 + integrate.quad(f, 0, 40, args=(x,), limit=400, epsabs=1e-13,
                                               epsrel=1e-13)[0] / (2 * np.pi ** 2 * x)
                     for x in r])


def test_grid_layout():
    g = MomentumGrid(2, 1.0, 5)
    pts = g.points()
    assert pts.shape == (24, 2)
    assert not np.any(np.all(pts == 0, axis=1))
    assert np.allclose(pts[g.negated()], -pts)
    assert np.allclose(pts[g.index_of((1, -2))], [0.5, -1.0])
    with pytest.raises(SingularModeError):
        g.index_of((0, 0))
    with pytest.raises(ValueError):
        MomentumGrid(3, 8.0, 64)


def test_torus_grid_spacing():
    g = MomentumGrid.torus(3, 10.0, 8.0)
    assert g.spacing == pytest.approx(2 * np.pi / 10)
    assert g.weight == pytest.approx(1 / 1000)


def test_solve_k1(markless, two_mark, eig_two):
    e1 = leading_eigen(markless)
    assert solve_k1(markless, e1, 2.0) == pytest.approx([2.0])
    assert solve_k1(two_mark, eig_two, 1.0) == pytest.approx([1.0, 1.0], abs=1e-12)
    k1 = solve_k1(two_mark, eig_two, 1.0)
    assert np.max(np.abs(-k1 + eig_two.kappa_cr * two_mark.operator() @ k1)) < 1e-10
    with pytest.raises(CriticalityError):
        solve_k1(two_mark, eig_two, 1.0, kappa=0.5)


def test_markless_pair_hat_examples(gauss3):
    class Half:
        dim = 1
        def char_fn(self, p):
            return np.full(np.atleast_2d(p).shape[0], 0.5 + 0j)
    assert markless_pair_hat(Half(), 1.0, np.array([1.0])) == pytest.approx(1.0)
    a = np.exp(-0.5)
    assert markless_pair_hat(gauss3, 2.0, np.array([1.0, 0, 0])) == pytest.approx(
        2 * 2 * a / (2 - 2 * a))
    assert markless_pair_hat(gauss3, 3.0, np.array([40.0, 0, 0])) == pytest.approx(0.0)
    with pytest.raises(SingularModeError):
        markless_pair_hat(gauss3, 1.0, np.zeros(3))


def test_single_mark_reduces_to_markless(markless, gauss3):
    e = leading_eigen(markless)
    grid = MomentumGrid(3, 8.0, 17)
    pair = solve_pair(markless, e, gauss3, 1.3, grid)
    ref = markless_pair_hat(gauss3, 1.3, grid.points())
    assert np.max(np.abs(pair.values[:, 0, 0] - ref)) < 1e-12


def test_mode_solution_matches_brute_force(two_mark, eig_two, gauss3):
    p = np.array([1.0, 0.0, 0.0])
    sol = solve_pair_mode(two_mark, eig_two, gauss3, 1.0, p)
    a = np.exp(-0.5)
    kappa = eig_two.kappa_cr
    Q = np.array([[2.0, 1.0], [1.0, 2.0]])
    nu = np.array([0.5, 0.5])
    q = eig_two.q
    # assemble the 4x4 system entry by entry
    M = np.zeros((4, 4))
    f = np.zeros(4)
    for i in range(2):
        for j in range(2):
            row = 2 * i + j
            M[row, row] += 2.0
            for k in range(2):
                M[row, 2 * k + j] -= a * kappa * Q[i, k] * nu[k]
                M[row, 2 * i + k] -= a * kappa * Q[j, k] * nu[k]
            f[row] = kappa * (q[j] * a * Q[i, j] + q[i] * a * Q[j, i])
    ref = np.linalg.solve(M, f).reshape(2, 2)
    assert np.max(np.abs(sol - ref)) < 1e-12
    assert np.max(np.abs(M @ sol.ravel() - f)) < 1e-10
    with pytest.raises(SingularModeError):
        solve_pair_mode(two_mark, eig_two, gauss3, 1.0, np.zeros(3))


def test_assembled_markless_matches_quadrature(markless, gauss3):
    e = leading_eigen(markless)
    pair = solve_pair(markless, e, gauss3, 1.0, MomentumGrid())
    r = np.linspace(0.25, 5.0, 20)
    d = np.ones(3) / np.sqrt(3)
    k = assemble_pair_real(pair, r[:, None] * d[None])[:, 0, 0]
    assert np.max(np.abs(k - radial_oracle(1.0, r))) < 1e-6


def test_pole_profile_limit():
    r = np.array([0.0, 1e-4, 1.0])
    v = pole_profile(3, r)
    assert v[0] == pytest.approx(v[1], rel=1e-6)
    # at r = 1: (1/2) pi^-3/2 Gamma(1/2) P(1/2, 1/2) / r = erf(1/sqrt 2) / (2 pi)
    from scipy.special import erf
    assert v[2] == pytest.approx(erf(1 / np.sqrt(2)) / (2 * np.pi), rel=1e-12)


def test_marked_solution_properties(two_mark, eig_two, gauss3):
    grid = MomentumGrid(3, 8.0, 33)
    pair = solve_pair(two_mark, eig_two, gauss3, 1.0, grid)
    neg = grid.negated()
    # reality and exchange for a symmetric kernel
    assert np.max(np.abs(pair.values[neg] - np.conj(pair.values))) < 1e-13
    assert np.max(np.abs(pair.values[neg] - pair.values.transpose(0, 2, 1))) < 1e-13
    res = stationarity_residual(pair)
    assert res["sup"] < 1e-10 and res["l1"] < 1e-8 and res["constant"] < 1e-12
    w = np.array([[0.3, -0.2, 0.9], [1.5, 0.0, 0.1]])
    assert np.allclose(assemble_pair_real(pair, -w), assemble_pair_real(pair, w).transpose(0, 2, 1))
    ray = np.linspace(0, 6, 25)[:, None] * np.array([1.0, 0, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AliasingWarning)
        k = assemble_pair_real(pair, ray)
    excess = np.max(np.abs(k - pair.constant_term[None]), axis=(1, 2))
    assert np.all(np.diff(excess) <= 1e-9)
    assert np.all(k >= -1e-9)
    assert np.isfinite(pair_bound(pair, ray))


def test_asymmetric_and_drifted_kernels_are_real_in_space(asymmetric):
    e = leading_eigen(asymmetric)
    disp = Gaussian(3, np.diag([1.0, 0.5, 2.0]), loc=[0.3, 0.0, 0.0])
    grid = MomentumGrid(3, 6.0, 17)
    pair = solve_pair(asymmetric, e, disp, 1.0, grid)
    neg = grid.negated()
    # exchange: k(-p; s2, s1) = k(p; s1, s2); reality: k(-p) = conj k(p)
    assert np.max(np.abs(pair.values[neg].transpose(0, 2, 1) - pair.values)) < 1e-12
    assert np.max(np.abs(pair.values[neg] - np.conj(pair.values))) < 1e-12
    assert stationarity_residual(pair)["sup"] < 1e-10


def test_mortality_variant_pole_is_grid_stable(two_mark_mortality, gauss3):
    e = leading_eigen(two_mark_mortality, rescaled=True)
    w = np.array([[0.5, 0.2, 0.0], [2.0, 1.0, 0.5]])
    a = assemble_pair_real(solve_pair(two_mark_mortality, e, gauss3, 1.0,
                                      MomentumGrid(3, 8.0, 65)), w)
    b = assemble_pair_real(solve_pair(two_mark_mortality, e, gauss3, 1.0,
                                      MomentumGrid(3, 10.0, 81)), w)
    assert np.max(np.abs(a - b)) < 1e-6


def test_aliasing_warning(two_mark, eig_two, gauss3):
    pair = solve_pair(two_mark, eig_two, gauss3, 1.0, MomentumGrid(3, 8.0, 17))
    with pytest.warns(AliasingWarning):
        assemble_pair_real(pair, np.array([pair.grid.resolvable + 1, 0, 0]))


def test_shell_average_matches_pointwise(markless, gauss3):
    e = leading_eigen(markless)
    pair = solve_pair(markless, e, gauss3, 1.0, MomentumGrid())
    edges = np.array([1.0, 1.05])
    sh = shell_average(pair, edges)[0, 0, 0]
    r = np.linspace(1.0, 1.05, 11)
    pts = assemble_pair_real(pair, r[:, None] * np.array([1.0, 0, 0]))[:, 0, 0]
    wts = r ** 2 / np.sum(r ** 2)
    assert sh == pytest.approx(np.sum(wts * pts), abs=1e-5)


def test_criticality_integral_dimensions():
    c3 = criticality_integral(Gaussian(3, 1.0))
    c2 = criticality_integral(Gaussian(2, 1.0))
    c1 = criticality_integral(Gaussian(1, 1.0))
    assert c3.converged(0.01)
    assert c2.diverging(0.2) and not c2.converged(0.01)
    assert c1.total_growth > c2.total_growth
    assert np.mean(c3.increment_ratios[-2:]) == pytest.approx(0.5, abs=0.05)
    assert np.mean(c2.increment_ratios[-2:]) == pytest.approx(1.0, abs=0.05)


def test_criticality_integral_radial_path_is_the_lattice_sum():
    from qscontact.stationary import _criticality_sum, _criticality_sum_radial
    for d in (1, 2, 3):
        for disp in (Gaussian(d, 0.7), UniformBall(d, 1.2)):
            a = _criticality_sum(disp, d, 6.0, 33)
            b = _criticality_sum_radial(disp, d, 6.0, 33)
            assert a == pytest.approx(b, rel=1e-12)


def test_csv_writers(tmp_path, two_mark, eig_two, gauss3):
    pair = solve_pair(two_mark, eig_two, gauss3, 1.0, MomentumGrid(3, 4.0, 5))
    write_pair_modes_csv(pair, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "mode,p0,p1,p2,s1,s2,re,im"
    assert len(lines) == 1 + pair.grid.size * 4
    write_pair_slice_csv(pair, [1, 0, 0], [0.0, 1.0], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "distance,k_0_0,k_0_1,k_1_0,k_1_1"
