"""Exact event-driven simulation of the marked contact process on a torus.

Each particle with mark s dies at rate m(s) and gives birth at total rate
kappa * beta(s), beta(s) = sum_j Q(s_j, s) nu_j, because the dispersal
density integrates to one.  A child lands at parent + displacement (wrapped
onto [0, L)^d) and takes mark s' with probability Q(s', s) nu(s') / beta(s).
No neighbour queries are needed, so the Gillespie loop works on per-mark
buckets of positions with O(K) event selection.

Replicas draw from independent streams derived from (seed, replica index),
so a replica's output does not depend on how replicas are scheduled.
"""
from __future__ import annotations

import csv
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dispersal import ball_volume

__all__ = [
    "AliasTable",
    "BirthRateTable",
    "Configuration",
    "SimParams",
    "PoissonStart",
    "EventRecord",
    "ReplicaLog",
    "ObservationLog",
    "Estimate",
    "PairCorrelation",
    "build_rate_table",
    "replica_generator",
    "poisson_configuration",
    "step",
    "run",
    "estimate_density",
    "estimate_mark_histogram",
    "estimate_pair_correlation",
    "write_observation_csv",
    "write_pair_correlation_csv",
    "write_manifest",
]

_BLOCK = 4096
_GUARD_STDS = 8.0


class AliasTable:
    """Walker alias sampler over ``len(weights)`` outcomes (Vose's construction)."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("alias weights must be nonnegative with positive sum")
        n = w.size
        scaled = w * n / w.sum()
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] -= 1.0 - scaled[s]
            (small if scaled[g] < 1.0 else large).append(g)
        self.weights = w
        self.prob = prob.tolist()
        self.alias = alias.tolist()
        self.size = n

    def sample(self, u):
        """Outcome for one uniform ``u`` in [0, 1)."""
        x = u * self.size
        j = int(x)
        return j if x - j < self.prob[j] else self.alias[j]

    def probabilities(self):
        """Outcome probabilities implied by the table (for checks)."""
        p = np.array(self.prob) / self.size
        out = p.copy()
        np.add.at(out, np.array(self.alias), (1.0 - np.array(self.prob)) / self.size)
        return out


@dataclass
class BirthRateTable:
    """beta per parent mark and the child-mark sampler for each parent."""

    beta: np.ndarray
    samplers: list

    def child_distribution(self, parent):
        return self.samplers[parent].weights / self.beta[parent]


def build_rate_table(kernel, space=None):
    """beta_i = sum_j Q(s_j, s_i) nu_j and alias samplers over child marks.

    Parent i produces a child of mark j with weight Q(s_j, s_i) nu_j.
    """
    space = kernel.space if space is None else space
    if space.size != kernel.space.size:
        raise ValueError("space and kernel mark counts differ")
    cols = kernel.q_matrix * space.weights[:, None]   # (child, parent)
    beta = cols.sum(axis=0)
    return BirthRateTable(beta=beta, samplers=[AliasTable(cols[:, i]) for i in range(beta.size)])


@dataclass
class Configuration:
    """Marked particles on the torus [0, L)^d at a given time."""

    positions: np.ndarray
    marks: np.ndarray
    torus_length: float
    time: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        marks = np.asarray(self.marks, dtype=int)
        if pos.ndim != 2 or marks.shape != (pos.shape[0],):
            raise ValueError("positions must be (N, d) with one mark per particle")
        if pos.size and (np.any(pos < 0) or np.any(pos >= self.torus_length)):
            raise ValueError("positions must lie in [0, L)^d")
        self.positions = pos
        self.marks = marks

    @property
    def size(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def empty(self):
        return self.size == 0

    def mark_counts(self, K):
        return np.bincount(self.marks, minlength=K)[:K]


@dataclass(frozen=True)
class PoissonStart:
    """Marked Poisson field: intensity ``rho`` and mark density ``h`` w.r.t. nu."""

    rho: float
    h: np.ndarray | None = None


@dataclass
class SimParams:
    """Model and run parameters of a simulation.

    ``kappa`` may be 0 (pure death).  The torus must be at least eight
    dispersal standard deviations wide so the periodic images of a
    birth kernel do not overlap appreciably.
    """

    kernel: object
    dispersal: object
    kappa: float
    torus_length: float
    t_end: float
    seed: int = 0
    replicas: int = 1

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError("kappa must be nonnegative")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if int(self.replicas) < 1:
            raise ValueError("replicas must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        guard = _GUARD_STDS * self.dispersal.std_max()
        if self.torus_length < guard:
            raise ValueError(f"torus length {self.torus_length} is below the aliasing guard "
                             f"{guard:.4g} (8 dispersal standard deviations)")
        self.replicas = int(self.replicas)

    @property
    def dim(self):
        return self.dispersal.dim

    @property
    def volume(self):
        return float(self.torus_length) ** self.dim


@dataclass(frozen=True)
class EventRecord:
    kind: str            # "birth", "death" or "absorbed"
    time: float
    mark: int = -1
    parent_mark: int = -1
    position: tuple = ()


def replica_generator(seed, replica, purpose=0):
    """Independent PCG64 stream for (seed, replica, purpose)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), int(purpose)))
    return np.random.Generator(np.random.PCG64(ss))


def poisson_configuration(params, start, rng):
    """Sample the initial marked Poisson field."""
    space = params.kernel.space
    K = space.size
    h = np.full(K, 1.0 / space.total_mass) if start.h is None else np.asarray(start.h, float)
    if h.shape != (K,) or np.any(h < 0):
        raise ValueError("h must be a nonnegative K-vector")
    probs = h * space.weights
    if abs(probs.sum() - 1.0) > 1e-8:
        raise ValueError(f"h is not normalized: integral {probs.sum()!r} != 1")
    if start.rho < 0:
        raise ValueError("rho must be nonnegative")
    n = int(rng.poisson(start.rho * params.volume))
    pos = rng.random((n, params.dim)) * params.torus_length
    pos[pos >= params.torus_length] = 0.0
    marks = rng.choice(K, size=n, p=probs / probs.sum()) if n else np.zeros(0, int)
    return Configuration(pos, marks, params.torus_length, 0.0)


class _Streams:
    """Block-buffered random numbers: waiting times, uniforms, displacements."""

    def __init__(self, rng_time, rng_choice, rng_disp, dispersal, block=_BLOCK):
        self.rng_time, self.rng_choice, self.rng_disp = rng_time, rng_choice, rng_disp
        self.dispersal = dispersal
        self.block = block
        self.exps, self.unis, self.disps = [], [], []
        self.ie = self.iu = self.id = 0

    def exp(self):
        if self.ie == len(self.exps):
            self.exps = self.rng_time.standard_exponential(self.block).tolist()
            self.ie = 0
        self.ie += 1
        return self.exps[self.ie - 1]

    def uni(self):
        if self.iu == len(self.unis):
            self.unis = self.rng_choice.random(self.block).tolist()
            self.iu = 0
        self.iu += 1
        return self.unis[self.iu - 1]

    def disp(self):
        if self.id == len(self.disps):
            self.disps = np.atleast_2d(
                self.dispersal.sample_displacement(self.rng_disp, self.block)).tolist()
            self.id = 0
        self.id += 1
        return self.disps[self.id - 1]


class _Engine:
    """Gillespie state: per-mark buckets of positions plus rate bookkeeping."""

    def __init__(self, params, table, config):
        kern = params.kernel
        self.K = kern.space.size
        self.L = float(params.torus_length)
        self.dim = params.dim
        self.death = kern.mortality.tolist()
        self.birth = (params.kappa * table.beta).tolist()
        self.samplers = table.samplers
        self.buckets = [[] for _ in range(self.K)]
        for x, s in zip(config.positions.tolist(), config.marks.tolist()):
            self.buckets[s].append(x)
        self.time = float(config.time)
        self.births = 0
        self.deaths = 0

    def total_rate(self):
        return sum(len(b) * (d + r) for b, d, r in zip(self.buckets, self.death, self.birth))

    def counts(self):
        return [len(b) for b in self.buckets]

    def configuration(self):
        pos, marks = [], []
        for s, b in enumerate(self.buckets):
            pos.extend(b)
            marks.extend([s] * len(b))
        arr = np.array(pos, dtype=float) if pos else np.zeros((0, self.dim))
        return Configuration(arr, np.array(marks, dtype=int), self.L, self.time)

    def advance(self, streams, t_stop, on_sample=None, sample_times=(), max_events=None,
                events=None):
        """Run events until ``t_stop``, extinction, or ``max_events``.

        ``on_sample(t)`` is called for each entry of ``sample_times`` reached
        (the state is piecewise constant between events).  Returns the last
        event kind or "absorbed".
        """
        buckets, death, birth, samplers = self.buckets, self.death, self.birth, self.samplers
        K, L = self.K, self.L
        samples = list(sample_times)
        si = 0
        n_events = 0
        rate = self.total_rate()
        while True:
            if max_events is not None and n_events >= max_events:
                return "paused"
            if rate <= 0.0:
                while si < len(samples) and samples[si] <= t_stop:
                    on_sample(samples[si])
                    si += 1
                if events is not None:
                    events.append(EventRecord("absorbed", self.time))
                return "absorbed"
            t_next = self.time + streams.exp() / rate
            while si < len(samples) and samples[si] < t_next and samples[si] <= t_stop:
                on_sample(samples[si])
                si += 1
            if t_next > t_stop:
                self.time = t_stop
                return "stopped"
            self.time = t_next
            # pick a (mark, event type) category proportionally to its rate
            u = streams.uni() * rate
            acc = 0.0
            chosen = K - 1
            kind = 1
            for s in range(K):
                n_s = len(buckets[s])
                if n_s == 0:
                    continue
                chosen = s
                acc += n_s * death[s]
                if u < acc:
                    kind = 0
                    break
                acc += n_s * birth[s]
                if u < acc:
                    kind = 1
                    break
            bucket = buckets[chosen]
            j = int(streams.uni() * len(bucket))
            if j >= len(bucket):
                j = len(bucket) - 1
            if kind == 0:
                gone = bucket[j]
                bucket[j] = bucket[-1]
                bucket.pop()
                rate -= death[chosen] + birth[chosen]
                self.deaths += 1
                if events is not None:
                    events.append(EventRecord("death", t_next, chosen, -1, tuple(gone)))
            else:
                parent = bucket[j]
                child = samplers[chosen].sample(streams.uni())
                dx = streams.disp()
                new = []
                for a, b in zip(parent, dx):
                    y = (a + b) % L
                    new.append(0.0 if y >= L else y)
                buckets[child].append(new)
                rate += death[child] + birth[child]
                self.births += 1
                if events is not None:
                    events.append(EventRecord("birth", t_next, child, chosen, tuple(new)))
            n_events += 1
            if (self.births + self.deaths) % 1024 == 0:
                rate = self.total_rate()


def step(config, params, table, rng):
    """Apply one Gillespie event to ``config``.

    Returns the new `Configuration` and an `EventRecord`; an empty
    configuration is absorbing and comes back unchanged with kind
    ``"absorbed"``.  ``rng`` is a `numpy.random.Generator`.
    """
    engine = _Engine(params, table, config)
    streams = _Streams(rng, rng, rng, params.dispersal, block=1)
    events = []
    engine.advance(streams, math.inf, max_events=1, events=events)
    if not events:
        return config, EventRecord("absorbed", config.time)
    return engine.configuration(), events[-1]


@dataclass
class ReplicaLog:
    """Observations of one replica at the run's sample times."""

    replica: int
    counts: np.ndarray                  # (T, K) per-mark particle counts
    births: int
    deaths: int
    extinction_time: float | None
    snapshots: dict = field(default_factory=dict)   # time -> Configuration
    events: list | None = None

    @property
    def population(self):
        return self.counts.sum(axis=1)


@dataclass
class ObservationLog:
    params: SimParams
    sample_times: np.ndarray
    replicas: list

    @property
    def counts(self):
        """(R, T, K) per-mark counts."""
        return np.array([r.counts for r in self.replicas])

    @property
    def population(self):
        """(R, T) total counts."""
        return self.counts.sum(axis=2)

    def time_index(self, t):
        i = int(np.argmin(np.abs(self.sample_times - t)))
        if abs(self.sample_times[i] - t) > 1e-9:
            raise KeyError(f"time {t} was not sampled")
        return i

    def mean_ratio(self, t):
        """Replica mean of N(t)/N(0) over replicas with N(0) > 0, and its stderr."""
        pop = self.population
        ok = pop[:, 0] > 0
        ratio = pop[ok, self.time_index(t)] / pop[ok, 0]
        return float(ratio.mean()), float(ratio.std(ddof=1) / np.sqrt(ratio.size))


def _run_replica(params, initial, replica, sample_times, snapshot_times, record_events):
    table = build_rate_table(params.kernel)
    if isinstance(initial, Configuration):
        config = initial
    else:
        config = poisson_configuration(params, initial, replica_generator(params.seed, replica, 0))
    streams = _Streams(replica_generator(params.seed, replica, 1),
                       replica_generator(params.seed, replica, 2),
                       replica_generator(params.seed, replica, 3),
                       params.dispersal)
    engine = _Engine(params, table, config)
    counts = []
    snaps = {}
    snap_set = {float(t) for t in snapshot_times}
    extinct = [None]

    def on_sample(t):
        counts.append(engine.counts())
        if float(t) in snap_set:
            c = engine.configuration()
            c.time = float(t)
            snaps[float(t)] = c

    events = [] if record_events else None
    result = engine.advance(streams, params.t_end, on_sample, sample_times, events=events)
    if result == "absorbed":
        extinct[0] = engine.time
    return ReplicaLog(replica, np.array(counts, dtype=np.int64).reshape(-1, engine.K),
                      engine.births, engine.deaths, extinct[0], snaps, events)


def run(params, initial, sample_times=None, snapshot_times=(), record_events=False, n_jobs=1):
    """Simulate ``params.replicas`` independent replicas.

    Parameters
    ----------
    params : SimParams
    initial : PoissonStart or Configuration
        A Poisson start is resampled per replica; a fixed configuration is
        shared by all replicas.
    sample_times : array_like, optional
        Observation times in [0, t_end]; default 0..t_end in 11 steps.
    snapshot_times : iterable of float
        Subset of sample times at which full configurations are kept (for
        pair-correlation estimates).
    record_events : bool
        Keep every event record (memory heavy; for determinism checks).
    n_jobs : int
        Worker processes; results do not depend on it.

    Returns
    -------
    ObservationLog
    """
    if sample_times is None:
        sample_times = np.linspace(0.0, params.t_end, 11)
    times = np.unique(np.asarray(sample_times, dtype=float))
    if times.size and (times[0] < 0 or times[-1] > params.t_end + 1e-12):
        raise ValueError("sample times must lie in [0, t_end]")
    missing = set(float(t) for t in snapshot_times) - set(times.tolist())
    if missing:
        raise ValueError(f"snapshot times {sorted(missing)} are not sample times")
    if isinstance(initial, Configuration) and initial.size and (
            initial.dim != params.dim or initial.torus_length != params.torus_length):
        raise ValueError("initial configuration does not match the torus")
    args = [(params, initial, r, times.tolist(), tuple(snapshot_times), record_events)
            for r in range(params.replicas)]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            logs = list(pool.map(_run_replica, *zip(*args)))
    else:
        logs = [_run_replica(*a) for a in args]
    return ObservationLog(params, times, logs)


@dataclass(frozen=True)
class Estimate:
    value: np.ndarray | float
    stderr: np.ndarray | float


def _window_counts(log, i, t, window, marks=None):
    lo, hi = (np.asarray(window[0], float), np.asarray(window[1], float))
    out = []
    for rep in log.replicas:
        c = rep.snapshots.get(float(t))
        if c is None:
            raise KeyError(f"no snapshot at t={t}; request it via snapshot_times")
        inside = np.all((c.positions >= lo) & (c.positions < hi), axis=1)
        out.append(inside.sum())
    return np.array(out, dtype=float), float(np.prod(hi - lo))


def estimate_density(log, t, window=None):
    """N(V)/V at time ``t`` with a replica-based standard error.

    ``window`` is ``None`` (the whole torus) or a (lower, upper) corner
    pair of a box inside the torus, which needs a snapshot at ``t``.
    """
    i = log.time_index(t)
    if window is None:
        n = log.population[:, i].astype(float)
        vol = log.params.volume
    else:
        n, vol = _window_counts(log, i, t, window)
    dens = n / vol
    err = dens.std(ddof=1) / np.sqrt(dens.size) if dens.size > 1 else float("nan")
    return float(dens.mean()), float(err)


def estimate_mark_histogram(log, t):
    """Per-mark densities count_i / L^d (replica mean, stderr), comparable to rho q_i nu_i.

    Raises ``ValueError`` if every replica is extinct at ``t``.
    """
    i = log.time_index(t)
    c = log.counts[:, i, :].astype(float)
    if c.sum() == 0:
        raise ValueError(f"no particles at t={t}: empty sample")
    dens = c / log.params.volume
    err = dens.std(axis=0, ddof=1) / np.sqrt(dens.shape[0]) if dens.shape[0] > 1 \
        else np.full(dens.shape[1], np.nan)
    return Estimate(dens.mean(axis=0), err)


@dataclass
class PairCorrelation:
    """Binned pair-correlation estimate per mark pair.

    ``values[b, a1, a2]`` estimates k2 at separations in bin b; bins with
    no counted pairs at all are NaN (missing).
    """

    edges: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    pair_counts: np.ndarray

    @property
    def centres(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def _pair_counts(config, edges, K):
    """Ordered pairs of distinct particles per (bin, mark, mark)."""
    L = config.torus_length
    out = np.zeros((edges.size - 1, K, K))
    trees = {}
    for a in range(K):
        pts = config.positions[config.marks == a]
        if pts.shape[0]:
            trees[a] = (cKDTree(pts, boxsize=L), pts.shape[0])
    for a, (ta, na) in trees.items():
        for b, (tb, nb) in trees.items():
            cum = ta.count_neighbors(tb, edges).astype(float)
            if a == b:
                cum -= na          # self pairs sit at distance 0
            out[:, a, b] = np.diff(cum)
    return out


def estimate_pair_correlation(log, edges, times):
    """Torus pair-counting estimator of k2 per mark pair.

    For each snapshot, ordered pairs of distinct particles are binned by
    toroidal distance and divided by (shell volume * L^d * nu_a * nu_b);
    snapshots in ``times`` are averaged per replica, then replicas are
    averaged with a standard error.  Bins must lie in (0, L/2], where the
    shells do not wrap onto themselves.
    """
    params = log.params
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
        raise ValueError("edges must be increasing and nonnegative")
    if edges[-1] > params.torus_length / 2:
        raise ValueError("bins must lie within half the torus length")
    times = [float(t) for t in np.atleast_1d(times)]
    K = params.kernel.space.size
    nu = params.kernel.space.weights
    shells = np.diff(ball_volume(params.dim, edges))
    norm = shells[:, None, None] * params.volume * np.outer(nu, nu)[None]
    per_rep = []
    total = np.zeros((edges.size - 1, K, K))
    for rep in log.replicas:
        acc = np.zeros_like(total)
        for t in times:
            c = rep.snapshots.get(t)
            if c is None:
                raise KeyError(f"no snapshot at t={t}; request it via snapshot_times")
            counts = _pair_counts(c, edges, K)
            total += counts
            acc += counts
        per_rep.append(acc / len(times) / norm)
    per_rep = np.array(per_rep)
    values = per_rep.mean(axis=0)
    if per_rep.shape[0] > 1:
        err = per_rep.std(axis=0, ddof=1) / np.sqrt(per_rep.shape[0])
    else:
        err = np.full_like(values, np.nan)
    values[total == 0] = np.nan
    err[total == 0] = np.nan
    return PairCorrelation(edges, values, err, total)


def _fmt(x):
    return repr(float(x))


def write_observation_csv(log, path):
    """Rows: replica, time, N, count per mark."""
    K = log.params.kernel.space.size
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["replica", "time", "N"] + [f"n_{k}" for k in range(K)])
        for rep in log.replicas:
            for t, c in zip(log.sample_times, rep.counts):
                wr.writerow([rep.replica, _fmt(t), int(c.sum())] + [int(x) for x in c])


def write_pair_correlation_csv(est, path):
    """Rows: r_lo, r_hi, s1, s2, value, stderr, pairs (missing values left empty)."""
    K = est.values.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["r_lo", "r_hi", "s1", "s2", "value", "stderr", "pairs"])
        for b in range(est.values.shape[0]):
            for a1 in range(K):
                for a2 in range(K):
                    v, e = est.values[b, a1, a2], est.stderr[b, a1, a2]
                    wr.writerow([_fmt(est.edges[b]), _fmt(est.edges[b + 1]), a1, a2,
                                 "" if np.isnan(v) else _fmt(v),
                                 "" if np.isnan(e) else _fmt(e),
                                 int(est.pair_counts[b, a1, a2])])


def write_manifest(path, params, extra=None, timestamp=None):
    """JSON manifest: parameters, seed, library versions (and a timestamp if given)."""
    import scipy

    from . import __version__

    doc = {
        "seed": int(params.seed),
        "replicas": int(params.replicas),
        "kappa": float(params.kappa),
        "torus_length": float(params.torus_length),
        "t_end": float(params.t_end),
        "dim": int(params.dim),
        "marks": params.kernel.space.size,
        "versions": {
            "qscontact": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if timestamp is not None:
        doc["timestamp"] = timestamp
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
