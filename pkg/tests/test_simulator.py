import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qscontact.dispersal import Gaussian, ball_volume
from qscontact.marks import MarkKernel, MarkSpace, leading_eigen
from qscontact.simulator import (AliasTable, Configuration, PoissonStart, SimParams,
                                 build_rate_table, estimate_density, estimate_mark_histogram,
                                 estimate_pair_correlation, run, step, write_manifest,
                                 write_observation_csv, write_pair_correlation_csv)


def test_rate_table_examples(markless, two_mark, asymmetric):
    t = build_rate_table(markless)
    assert t.beta == pytest.approx([1.0])
    assert t.samplers[0].sample(0.99) == 0
    t = build_rate_table(two_mark)
    assert t.beta == pytest.approx([1.5, 1.5])
    assert t.child_distribution(0) == pytest.approx([2 / 3, 1 / 3])
    t = build_rate_table(asymmetric)
    # beta_i = sum_j Q(s_j, s_i) nu_j: column sums of ((2,1),(3,4)) / 2
    assert t.beta == pytest.approx([2.5, 2.5])
    assert t.child_distribution(1) == pytest.approx([0.2, 0.8])


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(1, 9), elements=st.floats(0.01, 10.0)))
def test_alias_table_reproduces_weights(w):
    table = AliasTable(w)
    assert table.probabilities() == pytest.approx(w / w.sum(), abs=1e-12)


def test_alias_table_sampling_frequencies():
    table = AliasTable(np.array([1.0, 2.0, 7.0]))
    u = np.random.default_rng(0).random(200_000)
    counts = np.bincount([table.sample(x) for x in u], minlength=3) / u.size
    assert counts == pytest.approx([0.1, 0.2, 0.7], abs=0.005)


def _params(kernel, kappa, L=8.0, t_end=5.0, dim=1, seed=0, replicas=1):
    return SimParams(kernel, Gaussian(dim, 1.0), kappa, L, t_end, seed=seed, replicas=replicas)


def test_torus_guard(markless):
    with pytest.raises(ValueError, match="guard"):
        _params(markless, 1.0, L=5.0)
    with pytest.raises(ValueError):
        _params(markless, 1.0, replicas=0)


def test_pure_death_extinction_time_is_exponential(markless):
    params = _params(markless, 0.0, t_end=1e6)
    table = build_rate_table(markless)
    rng = np.random.default_rng(5)
    times = []
    for _ in range(10_000):
        c = Configuration(np.array([[1.0]]), np.array([0]), 8.0)
        c2, ev = step(c, params, table, rng)
        assert ev.kind == "death" and c2.empty
        times.append(ev.time)
    times = np.array(times)
    assert abs(times.mean() - 1.0) <= 3 * times.std() / np.sqrt(times.size)


def test_empty_configuration_is_absorbing(markless):
    params = _params(markless, 1.0)
    empty = Configuration(np.zeros((0, 1)), np.zeros(0, int), 8.0, time=2.0)
    c, ev = step(empty, params, build_rate_table(markless), np.random.default_rng(0))
    assert ev.kind == "absorbed" and c.empty and c.time == 2.0
    log = run(_params(markless, 1.0, replicas=3), PoissonStart(0.0))
    assert np.all(log.population == 0)
    assert all(r.extinction_time == 0.0 for r in log.replicas)


def test_step_birth_places_child_on_torus(two_mark):
    params = SimParams(two_mark, Gaussian(2, 1.0), 100.0, 8.0, 1.0)
    c = Configuration(np.array([[7.9, 0.05]]), np.array([1]), 8.0)
    c2, ev = step(c, params, build_rate_table(two_mark), np.random.default_rng(3))
    assert ev.kind == "birth" and ev.parent_mark == 1 and c2.size == 2
    assert np.all((c2.positions >= 0) & (c2.positions < 8.0))


def test_poisson_initial_count(markless):
    params = SimParams(markless, Gaussian(3, 1.0), 1.0, 10.0, 0.0, seed=1, replicas=200)
    log = run(params, PoissonStart(5.0))
    n0 = log.population[:, 0]
    assert abs(n0.mean() - 5000) <= 3 * np.sqrt(5000) / np.sqrt(n0.size)


def test_seed_determinism_and_parallel_independence(two_mark):
    e = leading_eigen(two_mark)
    params = SimParams(two_mark, Gaussian(2, 1.0), e.kappa_cr, 8.0, 3.0, seed=42, replicas=4)
    a = run(params, PoissonStart(1.0, e.q), record_events=True)
    b = run(params, PoissonStart(1.0, e.q), record_events=True)
    c = run(params, PoissonStart(1.0, e.q), record_events=True, n_jobs=2)
    for ra, rb, rc in zip(a.replicas, b.replicas, c.replicas):
        assert ra.events == rb.events == rc.events
        assert np.array_equal(ra.counts, rc.counts)
    other = run(SimParams(two_mark, Gaussian(2, 1.0), e.kappa_cr, 8.0, 3.0, seed=43,
                          replicas=4), PoissonStart(1.0, e.q))
    assert not np.array_equal(other.counts, a.counts)


def test_event_balance_and_wrap(two_mark):
    e = leading_eigen(two_mark)
    params = SimParams(two_mark, Gaussian(2, 1.0), e.kappa_cr, 8.0, 4.0, seed=9, replicas=5)
    log = run(params, PoissonStart(2.0, e.q), record_events=True)
    for rep in log.replicas:
        n = rep.population
        assert rep.births - rep.deaths == n[-1] - n[0]
        pos = np.array([ev.position for ev in rep.events if ev.kind == "birth"])
        assert np.all((pos >= 0) & (pos < 8.0))


def test_subcritical_extinction_more_likely(markless):
    kw = dict(L=8.0, t_end=20.0, dim=1, replicas=300)
    crit = run(_params(markless, 1.0, seed=1, **kw), PoissonStart(0.5))
    sub = run(_params(markless, 0.5, seed=2, **kw), PoissonStart(0.5))
    frac = lambda log: np.mean([r.extinction_time is not None for r in log.replicas])
    assert frac(sub) > frac(crit)


def test_critical_mean_is_conserved(two_mark):
    e = leading_eigen(two_mark)
    params = SimParams(two_mark, Gaussian(1, 1.0), e.kappa_cr, 16.0, 3.0, seed=3,
                       replicas=400)
    log = run(params, PoissonStart(2.0, e.q), sample_times=[0.0, 1.0, 3.0])
    for t in (1.0, 3.0):
        m, se = log.mean_ratio(t)
        assert abs(m - 1.0) <= 3 * se


def test_density_of_fixed_configuration(markless):
    params = _params(markless, 1.0, t_end=0.0, replicas=2)
    c = Configuration(np.array([[1.0], [2.0], [7.5]]), np.zeros(3, int), 8.0)
    log = run(params, c, sample_times=[0.0], snapshot_times=[0.0])
    assert estimate_density(log, 0.0)[0] == 3 / 8.0
    assert estimate_density(log, 0.0, window=([0.0], [4.0]))[0] == 2 / 4.0


def test_histogram_concentrated(two_mark):
    params = _params(two_mark, 1.0, t_end=0.0, replicas=2)
    c = Configuration(np.array([[1.0], [2.0]]), np.array([1, 1]), 8.0)
    log = run(params, c, sample_times=[0.0])
    est = estimate_mark_histogram(log, 0.0)
    assert est.value == pytest.approx([0.0, 2 / 8.0])
    empty = run(params, PoissonStart(0.0), sample_times=[0.0])
    with pytest.raises(ValueError, match="empty"):
        estimate_mark_histogram(empty, 0.0)


def test_pair_estimator_two_particles(markless):
    params = SimParams(markless, Gaussian(3, 1.0), 1.0, 10.0, 0.0)
    c = Configuration(np.array([[1.0, 1.0, 1.0], [9.5, 1.0, 1.0]]), np.zeros(2, int), 10.0)
    log = run(params, c, sample_times=[0.0], snapshot_times=[0.0])
    edges = np.array([0.5, 1.0, 2.0, 3.0])
    est = estimate_pair_correlation(log, edges, [0.0])
    shell = ball_volume(3, 2.0) - ball_volume(3, 1.0)
    assert est.values[1, 0, 0] == pytest.approx(2 / (shell * 1000.0))
    assert np.isnan(est.values[0, 0, 0]) and np.isnan(est.values[2, 0, 0])
    with pytest.raises(ValueError):
        estimate_pair_correlation(log, np.array([1.0, 6.0]), [0.0])


def test_pair_estimator_poisson_is_flat(markless):
    params = SimParams(markless, Gaussian(3, 1.0), 1.0, 10.0, 0.0, seed=8, replicas=40)
    log = run(params, PoissonStart(1.0), sample_times=[0.0], snapshot_times=[0.0])
    est = estimate_pair_correlation(log, np.linspace(0.5, 4.0, 8), [0.0])
    # E[N(N-1)] / V^2 = rho^2 exactly for a Poisson count
    z = (est.values[:, 0, 0] - 1.0) / est.stderr[:, 0, 0]
    assert np.all(np.abs(z) < 3.5)


def test_writers(tmp_path, two_mark):
    e = leading_eigen(two_mark)
    params = SimParams(two_mark, Gaussian(3, 1.0), e.kappa_cr, 8.0, 1.0, seed=1, replicas=2)
    log = run(params, PoissonStart(0.2, e.q), sample_times=[0.0, 1.0], snapshot_times=[1.0])
    write_observation_csv(log, tmp_path / "obs.csv")
    lines = (tmp_path / "obs.csv").read_text().splitlines()
    assert lines[0] == "replica,time,N,n_0,n_1" and len(lines) == 1 + 2 * 2
    est = estimate_pair_correlation(log, np.linspace(0.5, 4.0, 4), [1.0])
    write_pair_correlation_csv(est, tmp_path / "pc.csv")
    doc = write_manifest(tmp_path / "m.json", params)
    assert doc["seed"] == 1 and "numpy" in doc["versions"]
