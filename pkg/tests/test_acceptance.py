"""Acceptance gate: one printed PASS/FAIL line per criterion.

Each test computes its quantity, prints a single summary line (visible in
``pytest -v`` output), then asserts.  Tolerances and runtime budgets are
fixed constants below; nothing is tuned to the outcome.
"""
import os
import time

import numpy as np
import pytest
import yaml

from qscontact import hierarchy, simulator, stationary
from qscontact.cli import main
from qscontact.dispersal import Gaussian
from qscontact.harness import _radial_quadrature
from qscontact.marks import MarkKernel, MarkSpace, asymptotic_density, leading_eigen

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")

EIGEN_TOL = 1e-10
FIXED_POINT_TOL = 1e-10
ODE_LIMIT_TOL = 1e-8
QUADRATURE_TOL = 1e-6
RESIDUAL_TOL = 1e-8
CONVERGED_CHANGE = 0.01
DIVERGED_GROWTH = 0.20
STATIONARY_DISTANCE = 1e-3
N_SIGMA = 3.0


@pytest.fixture
def report(capsys):
    def emit(n, ok, text):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
        return ok
    return emit


def two_mark(mortality=None):
    space = MarkSpace(np.array([0.5, 0.5]))
    m = None if mortality is None else np.asarray(mortality, float)
    return MarkKernel(space, np.array([[2.0, 1.0], [1.0, 2.0]]), m)


def perron_oracle(mat, nu):
    vals, vecs = np.linalg.eig(mat)
    i = int(np.argmax(vals.real))
    v = np.abs(vecs[:, i].real)
    return float(vals[i].real), v / (v @ nu)


def random_kernels(seed, count, mortality=False):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        K = int(rng.integers(1, 9))
        nu = rng.uniform(0.1, 1.0, K)
        q = rng.uniform(0.05, 3.0, (K, K))
        m = rng.uniform(0.3, 3.0, K) if mortality else None
        yield MarkKernel(MarkSpace(nu), q, m)


# ---------------------------------------------------------------- helpers

def eigen_errors(kernels, rescaled):
    worst, exact = 0.0, True
    for kern in kernels:
        nu = kern.space.weights
        e = leading_eigen(kern, rescaled=rescaled)
        qm = kern.q_matrix / kern.mortality[:, None] if rescaled else kern.q_matrix
        r, q = perron_oracle(qm * nu[None, :], nu)
        _, qa = perron_oracle(qm.T * nu[None, :], nu)
        worst = max(worst, abs(e.r - r) / r, np.max(np.abs(e.q - q)),
                    np.max(np.abs(e.q_adj - qa)))
        exact &= e.kappa_cr == 1.0 / e.r
    return worst, exact


def fixed_point_deviation(kernel, rescaled, rho=1.3):
    e = leading_eigen(kernel, rescaled=rescaled)
    traj = hierarchy.evolve_k1(kernel, e.kappa_cr, rho * e.q, 50.0,
                               sample_times=np.linspace(0.0, 50.0, 501))
    return float(np.max(np.abs(traj.values - rho * e.q)))


def relaxation_case(kernel, h, rescaled, seed, replicas=500, rho=1.0, t_mc=10.0):
    """(ODE error vs rho_1, MC z-score, rho_1, MC estimate, stderr)."""
    e = leading_eigen(kernel, rescaled=rescaled)
    rho1 = asymptotic_density(e, kernel.space, rho, h)
    gen = hierarchy.k1_generator(kernel, e.kappa_cr)
    lam = np.sort(np.linalg.eigvals(gen).real)
    rate = -lam[-2] if lam.size > 1 else 1.0
    t_end = max(10.0, 32.0 / rate)
    traj = hierarchy.evolve_k1(kernel, e.kappa_cr, rho * h, t_end)
    ode_err = abs(traj.densities()[-1] - rho1)
    params = simulator.SimParams(kernel, Gaussian(2, 1.0), e.kappa_cr, 10.0, t_mc,
                                 seed=seed, replicas=replicas)
    log = simulator.run(params, simulator.PoissonStart(rho, h), sample_times=[0.0, t_mc])
    est, se = simulator.estimate_density(log, t_mc)
    return ode_err, abs(est - rho1) / se, rho1, est, se


def mean_conservation(kernel, rescaled, seed, replicas=1000):
    """Max |mean ratio - 1| / stderr at t in {1,2,5}; subcritical ratio at t = 2; the log."""
    e = leading_eigen(kernel, rescaled=rescaled)
    times = [0.0, 1.0, 2.0, 5.0]
    start = simulator.PoissonStart(1.0, e.q)
    disp = Gaussian(2, 1.0)
    crit = simulator.run(simulator.SimParams(kernel, disp, e.kappa_cr, 8.0, 5.0, seed=seed,
                                             replicas=replicas), start, sample_times=times)
    z = []
    for t in times[1:]:
        mean, se = crit.mean_ratio(t)
        z.append(abs(mean - 1.0) / se)
    sub = simulator.run(simulator.SimParams(kernel, disp, 0.5 * e.kappa_cr, 8.0, 2.0,
                                            seed=seed + 1, replicas=replicas),
                        start, sample_times=[0.0, 2.0])
    return max(z), sub.mean_ratio(2.0)[0], crit, e


# ---------------------------------------------------------------- criteria

def test_criterion_1_eigen_oracle(report):
    t0 = time.perf_counter()
    worst, exact = eigen_errors(list(random_kernels(11, 20)), rescaled=False)
    e2 = leading_eigen(two_mark())
    elapsed = time.perf_counter() - t0
    ok = worst <= EIGEN_TOL and exact and abs(e2.r - 1.5) < 1e-12 and elapsed < 1.0
    report(1, ok, f"max error vs dense oracle {worst:.2e} (tol {EIGEN_TOL:g}), "
                  f"kappa_cr == 1/r: {exact}, 2-mark r={e2.r:.15g}, {elapsed:.2f}s (<1s)")
    assert ok


def test_criterion_2_fixed_point(report):
    t0 = time.perf_counter()
    dev = max(fixed_point_deviation(two_mark(), False),
              fixed_point_deviation(MarkKernel(MarkSpace(np.array([0.2, 0.3, 0.5])),
                                               np.array([[1.0, 0.4, 0.2], [0.3, 2.0, 0.7],
                                                         [0.5, 0.6, 1.5]])), False))
    elapsed = time.perf_counter() - t0
    ok = dev <= FIXED_POINT_TOL and elapsed < 1.0
    report(2, ok, f"max |k1(t) - rho q| over [0,50] = {dev:.2e} (tol {FIXED_POINT_TOL:g}), "
                  f"{elapsed:.2f}s (<1s)")
    assert ok


@pytest.mark.slow
def test_criterion_3_density_relaxation(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    ode, zs = [], []
    for case in range(5):
        K = int(rng.integers(2, 5))
        nu = rng.uniform(0.2, 1.0, K)
        kern = MarkKernel(MarkSpace(nu), rng.uniform(0.2, 1.5, (K, K)))
        h = rng.uniform(0.0, 1.0, K)
        h /= h @ nu
        o, z, *_ = relaxation_case(kern, h, False, seed=300 + case)
        ode.append(o)
        zs.append(z)
    elapsed = time.perf_counter() - t0
    ok = max(ode) <= ODE_LIMIT_TOL and max(zs) <= N_SIGMA and elapsed < 300
    report(3, ok, f"ODE limit max error {max(ode):.2e} (tol {ODE_LIMIT_TOL:g}); MC z-scores "
                  f"{', '.join(f'{z:.2f}' for z in zs)} (<= {N_SIGMA:g}), {elapsed:.1f}s (<300s)")
    assert ok


@pytest.mark.slow
def test_criterion_4_markless_pair_closure(report):
    t0 = time.perf_counter()
    single = MarkKernel(MarkSpace.single(), np.ones((1, 1)))
    e1 = leading_eigen(single)
    disp, rho, L = Gaussian(3, 1.0), 1.0, 10.0
    pair = stationary.solve_pair(single, e1, disp, rho, stationary.MomentumGrid(3, 8.0, 65))
    dist = np.linspace(0.25, 5.0, 20)
    ray = dist[:, None] * (np.ones(3) / np.sqrt(3))[None]
    spectral = stationary.assemble_pair_real(pair, ray)[:, 0, 0]
    quad_err = float(np.max(np.abs(spectral - _radial_quadrature(disp, rho, dist))))

    t_obs, edges = 5.0, np.linspace(0.5, 4.0, 8)
    params = simulator.SimParams(single, disp, 1.0, L, t_obs, seed=20240611, replicas=400)
    log = simulator.run(params, simulator.PoissonStart(rho), sample_times=[0.0, t_obs],
                        snapshot_times=[t_obs])
    est = simulator.estimate_pair_correlation(log, edges, [t_obs])

    def theory(extent, dt):
        g = stationary.MomentumGrid.torus(3, L, extent)
        tr = hierarchy.evolve_k2(single, disp, g, 1.0, rho=rho, t_end=t_obs, dt=dt,
                                 sample_times=[t_obs], zero_mode=True)
        return stationary.shell_average(tr.state(len(tr) - 1), edges)[:, 0, 0]

    th = theory(8.0, 0.02)
    grid_tol = np.abs(th - theory(10.0, 0.01))
    mc, se = est.values[:, 0, 0], est.stderr[:, 0, 0]
    score = np.abs(mc - th) / (N_SIGMA * se + grid_tol)
    elapsed = time.perf_counter() - t0
    ok = quad_err <= QUADRATURE_TOL and np.all(score <= 1.0) and elapsed < 600
    report(4, ok, f"spectral vs quadrature {quad_err:.2e} (tol {QUADRATURE_TOL:g}); MC vs "
                  f"hierarchy worst |diff|/(3se+grid) = {score.max():.2f} (<= 1) over "
                  f"[0.5, 4] sigma, {elapsed:.1f}s (<600s)")
    assert ok


def test_criterion_5_stationarity_residual(report):
    t0 = time.perf_counter()
    kern = two_mark()
    e = leading_eigen(kern)
    pair = stationary.solve_pair(kern, e, Gaussian(3, 1.0), 1.0,
                                 stationary.MomentumGrid(3, 8.0, 65))
    res = stationary.stationarity_residual(pair)
    elapsed = time.perf_counter() - t0
    worst = max(res["sup"], res["l1"], res["constant"])
    ok = worst <= RESIDUAL_TOL and elapsed < 30
    report(5, ok, f"residual sup {res['sup']:.2e}, grid-norm {res['l1']:.2e}, constant "
                  f"{res['constant']:.2e} (tol {RESIDUAL_TOL:g}), {elapsed:.1f}s (<30s)")
    assert ok


def test_criterion_6_dimension(report):
    t0 = time.perf_counter()
    c3 = stationary.criticality_integral(Gaussian(3, 1.0))
    c2 = stationary.criticality_integral(Gaussian(2, 1.0))
    elapsed = time.perf_counter() - t0
    ok = c3.converged(CONVERGED_CHANGE) and c2.diverging(DIVERGED_GROWTH) and elapsed < 60
    report(6, ok, f"d=3 last change {abs(c3.last_change):.2e} (<{CONVERGED_CHANGE:g}); d=2 "
                  f"growth {c2.total_growth:.3f} (>{DIVERGED_GROWTH:g}), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_7_convergence_to_stationarity(report):
    t0 = time.perf_counter()
    kern = two_mark()
    e = leading_eigen(kern)
    disp = Gaussian(3, 1.0)
    grid = stationary.MomentumGrid(3, 8.0, 65)
    traj = hierarchy.evolve_k2(kern, disp, grid, e.kappa_cr, rho=1.0, h=e.q, t_end=20.0,
                               sample_times=[5.0, 20.0])
    target = stationary.solve_pair(kern, e, disp, 1.0, grid)
    conv = hierarchy.convergence_report(traj, target)
    d5, d20 = conv.at(5.0), conv.at(20.0)
    elapsed = time.perf_counter() - t0
    ok = d20 < STATIONARY_DISTANCE and d20 < d5 and elapsed < 120
    report(7, ok, f"sup distance t=5: {d5:.3e}, t=20: {d20:.3e} (need < "
                  f"{STATIONARY_DISTANCE:g} and decreasing), {elapsed:.1f}s (<120s)")
    assert ok


@pytest.mark.slow
def test_criterion_8_mean_conservation(report):
    t0 = time.perf_counter()
    z, sub, _, _ = mean_conservation(two_mark(), False, seed=800)
    elapsed = time.perf_counter() - t0
    ok = z <= N_SIGMA and sub <= 0.7 and elapsed < 300
    report(8, ok, f"critical max |mean N(t)/N(0) - 1|/se over t=1,2,5 = {z:.2f} "
                  f"(<= {N_SIGMA:g}); 0.5 kappa_cr ratio at t=2 = {sub:.3f} (<= 0.7), "
                  f"{elapsed:.1f}s (<300s)")
    assert ok


@pytest.mark.slow
def test_criterion_9_mortality_variant(report):
    t0 = time.perf_counter()
    kern = two_mark([2.0, 1.0])
    eig_err, exact = eigen_errors([kern] + list(random_kernels(19, 20, mortality=True)), True)
    fp = fixed_point_deviation(kern, True)
    rng = np.random.default_rng(9)
    ode, zs = [], []
    for case in range(5):
        h = rng.uniform(0.0, 1.0, 2)
        h /= h @ kern.space.weights
        o, z, *_ = relaxation_case(kern, h, True, seed=900 + case)
        ode.append(o)
        zs.append(z)
    zc, sub, log, e = mean_conservation(kern, True, seed=990)
    hist = simulator.estimate_mark_histogram(log, 5.0)
    expected = 1.0 * e.q * kern.space.weights
    zh = float(np.max(np.abs(hist.value - expected) / hist.stderr))
    elapsed = time.perf_counter() - t0
    ok = (eig_err <= EIGEN_TOL and exact and fp <= FIXED_POINT_TOL
          and max(ode) <= ODE_LIMIT_TOL and max(zs) <= N_SIGMA
          and zc <= N_SIGMA and sub <= 0.7 and zh <= N_SIGMA and elapsed < 300)
    report(9, ok, f"m=(2,1): r~={e.r:.12g}, eigen error {eig_err:.1e}, fixed point "
                  f"{fp:.1e}, ODE {max(ode):.1e}, MC max z {max(zs):.2f}, mean z {zc:.2f}, "
                  f"sub ratio {sub:.3f}, histogram max z {zh:.2f}, {elapsed:.1f}s (<300s)")
    assert ok


def test_criterion_10_determinism(report, tmp_path):
    t0 = time.perf_counter()
    doc = yaml.safe_load(open(os.path.join(CONFIGS, "two_mark.yaml")))
    doc["task"]["replicas"] = 20
    doc["task"]["simulate"] = {"t_end": 2.0, "pair_times": [2.0],
                               "pair_bins": {"lower": 0.5, "upper": 3.0, "count": 5}}
    doc["task"]["evolve"] = {"t_end": 2.0, "dt": 0.05, "samples": [1, 2],
                             "grid": {"extent": 6.0, "points_per_axis": 17}}
    doc["task"]["pair"] = {"grid": {"extent": 6.0, "points_per_axis": 17},
                           "refinements": [17, 33, 65]}
    path = tmp_path / "det.yaml"
    path.write_text(yaml.safe_dump(doc))
    runs = []
    for rep in range(2):
        out = tmp_path / f"out{rep}"
        for sub in ("spectrum", "pair", "evolve", "simulate"):
            assert main([sub, "--config", str(path), "--out", str(out), "--seed", "4242"]) == 0
        runs.append(out)
    files = sorted(os.path.relpath(os.path.join(d, f), runs[0])
                   for d, _, fs in os.walk(runs[0]) for f in fs if f.endswith(".csv"))
    same = [open(runs[0] / f, "rb").read() == open(runs[1] / f, "rb").read() for f in files]
    elapsed = time.perf_counter() - t0
    ok = len(files) >= 8 and all(same) and elapsed < 60
    report(10, ok, f"{sum(same)}/{len(files)} CSVs byte-identical across repeated runs, "
                   f"{elapsed:.1f}s (<60s)")
    assert ok
