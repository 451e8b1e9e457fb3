"""Event simulation of the closed processor-sharing network.

With exponential service and processor sharing the per-pair counts form a
continuous-time Markov chain: queue ``j`` completes route-``i`` work at rate
``mu_ji * m_ji / m_j``.  The simulator draws the next event time from the
total rate, picks the queue and then the route in proportion to their
rates, and moves one customer to the next queue on its route.

Random numbers come from numpy's PCG64 seeded with ``seed``; draws are
taken in fixed-size chunks so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels as _k
from ._kernels import pair_layout
from .exact import StateDistribution
from .fluid import FluidTrajectory, entropy, uniform_state
from .model import NetworkModel

__all__ = [
    "Estimates",
    "ScaledPath",
    "simulate",
    "sample_path",
    "fluid_scaled_trajectory",
    "scaled_initial_counts",
    "sup_distance",
    "tv_distance",
    "merge_estimates",
]

CHUNK = 1 << 16


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _draws(rng):
    return rng.standard_exponential(CHUNK), rng.random((CHUNK, 2))


@dataclass(eq=False)
class Estimates:
    """Stationary estimates from one or more simulation runs.

    ``batch_rates`` holds per-batch completion rates for every (queue,
    route) pair; route throughputs are read at the first queue of each
    route and their half-widths come from batch means.
    """

    model: NetworkModel
    population: np.ndarray
    batch_rates: np.ndarray
    batch_length: float
    duration: float
    area: np.ndarray
    state_time: dict
    events: int
    confidence: float
    metadata: dict = field(default_factory=dict)

    def _ci(self, x):
        b = x.shape[0]
        mean = x.mean(axis=0)
        if b < 2:
            return mean, np.full(mean.shape, np.inf)
        q = stats.t.ppf(0.5 + self.confidence / 2, b - 1)
        return mean, q * x.std(axis=0, ddof=1) / math.sqrt(b)

    @property
    def pair_throughput(self) -> np.ndarray:
        """Completion rate of each route at each of its queues (J x I)."""
        lay = pair_layout(self.model)
        return lay.unflatten(self._ci(self.batch_rates)[0])

    @property
    def pair_halfwidth(self) -> np.ndarray:
        lay = pair_layout(self.model)
        return lay.unflatten(self._ci(self.batch_rates)[1])

    def _first_queue(self, arr):
        return np.array([arr[r[0], i] for i, r in enumerate(self.model.routes)])

    @property
    def throughput(self) -> np.ndarray:
        return self._first_queue(self.pair_throughput)

    @property
    def throughput_halfwidth(self) -> np.ndarray:
        return self._first_queue(self.pair_halfwidth)

    @property
    def mean_queue_lengths(self) -> np.ndarray:
        return pair_layout(self.model).unflatten(self.area / self.duration)

    @property
    def state_distribution(self) -> StateDistribution:
        """Fraction of time spent in each visited state."""
        if self.state_time is None:
            raise ValueError("states were not tracked in this run")
        keys = sorted(self.state_time)
        total = math.fsum(self.state_time.values())
        return StateDistribution(
            self.model.pairs, tuple(keys), np.array([self.state_time[k] for k in keys]) / total
        )

    def marginal(self, queues) -> StateDistribution:
        subset = set(self.model.queue_set(queues))
        return self.state_distribution.marginal([p for p in self.model.pairs if p[0] in subset])

    def to_text(self) -> str:
        m = self.model
        lines = [f"# {k} = {v}" for k, v in self.metadata.items()]
        lines += [f"# confidence = {self.confidence}", f"# events = {self.events}", "throughput:"]
        for r, x, h in zip(m.route_ids, self.throughput, self.throughput_halfwidth):
            lines.append(f"  {r}: {x:.17g} +- {h:.17g}")
        lines.append("mean_queue_lengths:")
        eml = self.mean_queue_lengths
        for j, i in m.pairs:
            lines.append(f"  {m.pair_label(j, i)}: {eml[j, i]:.17g}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        m = self.model
        lines = ["queue,route,throughput,halfwidth,mean_length"]
        tp, hw, eml = self.pair_throughput, self.pair_halfwidth, self.mean_queue_lengths
        for j, i in m.pairs:
            lines.append(
                f"{m.queues[j]},{m.route_ids[i]},{tp[j, i]:.17g},{hw[j, i]:.17g},{eml[j, i]:.17g}"
            )
        return "\n".join(lines) + "\n"


def merge_estimates(parts) -> Estimates:
    """Pool independent replications: batches are concatenated, times added."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    first = parts[0]
    state_time = None
    if all(p.state_time is not None for p in parts):
        state_time = {}
        for p in parts:
            for k, v in p.state_time.items():
                state_time[k] = state_time.get(k, 0.0) + v
    return Estimates(
        model=first.model,
        population=first.population,
        batch_rates=np.concatenate([p.batch_rates for p in parts]),
        batch_length=first.batch_length,
        duration=sum(p.duration for p in parts),
        area=sum(p.area for p in parts),
        state_time=state_time,
        events=sum(p.events for p in parts),
        confidence=first.confidence,
        metadata={"replications": len(parts), "seeds": [p.metadata.get("seed") for p in parts]},
    )


def _first_queue_state(model, n, lay):
    m = np.zeros(lay.P, dtype=np.int64)
    index = {p: k for k, p in enumerate(model.pairs)}
    for i, r in enumerate(model.routes):
        m[index[(r[0], i)]] = int(n[i])
    return m


def simulate(
    model: NetworkModel,
    n,
    horizon: float,
    warmup: float | None = None,
    seed: int = 0,
    *,
    batches: int = 20,
    confidence: float = 0.95,
    track_states: bool = True,
    initial=None,
) -> Estimates:
    """Run the chain on ``[0, horizon]`` and estimate stationary quantities on ``[warmup, horizon]``.

    Customers start at the first queue of their route unless ``initial``
    (J x I counts) is given.  ``warmup`` defaults to 20% of the horizon.
    """
    n = model.population_array(n, integer=True)
    if not np.any(n > 0):
        raise ValueError("population is zero on every route")
    if warmup is None:
        warmup = 0.2 * horizon
    if not (horizon > warmup >= 0):
        raise ValueError("need horizon > warmup >= 0")
    lay = pair_layout(model)
    if initial is None:
        m = _first_queue_state(model, n, lay)
    else:
        m = lay.flatten(np.asarray(initial)).astype(np.int64)
        if np.any(np.bincount(lay.pr, weights=m, minlength=model.I) != n):
            raise ValueError("initial counts do not match the population")
    init = m.copy()
    # mixed-radix state codes; disabled if they would overflow
    bound = n[lay.pr] + 1
    radix = np.ones(lay.P, dtype=np.int64)
    if track_states:
        total = 1
        for p in range(lay.P):
            radix[p] = total
            total *= int(bound[p])
        if total >= 2**62:
            track_states = False
    batch_len = (horizon - warmup) / batches
    completions = np.zeros((batches, lay.P), dtype=np.int64)
    area = np.zeros(lay.P)
    codes = np.zeros(CHUNK, dtype=np.int64)
    times = np.zeros(CHUNK)
    state_time: dict | None = {} if track_states else None
    rng = _rng(seed)
    t = 0.0
    events = 0
    while True:
        expo, unif = _draws(rng)
        t, used, done = _k.ctmc_run(
            m, lay.pq, lay.mu, lay.nextp, lay.qptr, lay.qpairs, lay.J, t, float(horizon), float(warmup),
            batches, batch_len, expo, unif, completions, codes, times, radix, area,
        )
        events += used - (1 if done else 0)
        if track_states:
            sel = codes[:used] >= 0
            uc, inv = np.unique(codes[:used][sel], return_inverse=True)
            sums = np.bincount(inv, weights=times[:used][sel])
            for code, v in zip(uc.tolist(), sums.tolist()):
                state_time[code] = state_time.get(code, 0.0) + v
        if done:
            break
    if track_states:
        decoded = {}
        for code, v in state_time.items():
            decoded[tuple(int(x) for x in (code // radix) % bound)] = v
        state_time = decoded
    return Estimates(
        model=model,
        population=n,
        batch_rates=completions / batch_len,
        batch_length=batch_len,
        duration=horizon - warmup,
        area=area,
        state_time=state_time,
        events=events,
        confidence=confidence,
        metadata={
            "seed": seed,
            "horizon": horizon,
            "warmup": warmup,
            "batches": batches,
            "initial_state": "custom" if initial is not None else "first queue of each route",
            "rng": "numpy PCG64",
        },
    )


def sample_path(model: NetworkModel, initial, times, seed: int = 0) -> np.ndarray:
    """States of the chain started from ``initial`` counts at the given increasing times.

    Returns an array of shape (len(times), J, I).
    """
    lay = pair_layout(model)
    m = lay.flatten(np.asarray(initial)).astype(np.int64)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("sample times must be increasing")
    out = np.zeros((len(times), lay.P), dtype=np.int64)
    rng = _rng(seed)
    t, k = 0.0, 0
    while k < len(times):
        expo, unif = _draws(rng)
        t, _, k = _k.ctmc_sample(m, lay.pq, lay.mu, lay.nextp, lay.qptr, lay.qpairs, lay.J, t, times, k, expo, unif, out)
    return lay.unflatten(out)


def scaled_initial_counts(model: NetworkModel, m0, c: float) -> np.ndarray:
    """Integer counts for scale ``c`` from a fluid state ``m0``.

    Route totals are ``round(c * n_i)``; each route's total is split over its
    queues by largest remainders of ``c * m0_ji``.
    """
    m0 = model.pair_array(m0) if not isinstance(m0, np.ndarray) else np.asarray(m0, dtype=float)
    counts = np.zeros((model.J, model.I), dtype=np.int64)
    for i, r in enumerate(model.routes):
        r = list(r)
        target = c * m0[r, i]
        total = int(math.floor(target.sum() + 0.5))
        if target.sum() > 0:
            target = target * (total / target.sum())
        base = np.floor(target).astype(np.int64)
        short = total - int(base.sum())
        order = np.argsort(-(target - base), kind="stable")
        base[order[:short]] += 1
        counts[r, i] = base
    return counts


@dataclass(eq=False)
class ScaledPath:
    """Sampled path of counts divided by ``c``, at fluid times ``t`` (real time ``c t``)."""

    model: NetworkModel
    c: float
    times: np.ndarray
    states: np.ndarray
    initial_counts: np.ndarray

    def beta(self) -> np.ndarray:
        return np.array([entropy(self.model, s) for s in self.states])

    def to_csv(self, beta_star: float | None = None) -> str:
        traj = FluidTrajectory(self.model, self.times, self.states, np.zeros_like(self.states), self.beta(), 0.0,
                               self.states[0].sum(axis=0))
        return traj.to_csv(beta_star)


def fluid_scaled_trajectory(
    model: NetworkModel,
    n_direction,
    c: float,
    horizon: float,
    seed: int = 0,
    *,
    m0=None,
    samples: int = 201,
) -> ScaledPath:
    """Simulate the network with about ``c * n`` customers and rescale space and time by ``c``.

    ``m0`` is the initial fluid state (route totals ``n_direction``); by
    default every route's mass is spread evenly.  Samples are taken on a
    uniform grid of ``samples`` points over ``[0, horizon]``.
    """
    if c < 1:
        raise ValueError("scale c must be at least 1")
    n = model.population_array(n_direction)
    if m0 is None:
        m0 = uniform_state(model, n)
    counts = scaled_initial_counts(model, m0, c)
    times = np.linspace(0.0, horizon, samples)
    path = sample_path(model, counts, c * times, seed)
    return ScaledPath(model, c, times, path / c, counts)


def sup_distance(path: ScaledPath, trajectory: FluidTrajectory) -> float:
    """Largest absolute gap over sample times and pairs between a scaled path and a fluid path."""
    ref = trajectory.at(path.times)
    return float(np.max(np.abs(path.states - ref)))


def tv_distance(p, q) -> float:
    """Total variation ``(1/2) sum |p - q|``; states missing on one side count as 0."""
    if isinstance(p, StateDistribution) and isinstance(q, StateDistribution) and p.pairs != q.pairs:
        raise ValueError("distributions live on different pairs")
    pd = p.as_dict() if isinstance(p, StateDistribution) else dict(p)
    qd = q.as_dict() if isinstance(q, StateDistribution) else dict(q)
    diffs = [abs(pd.get(k, 0.0) - qd.get(k, 0.0)) for k in set(pd) | set(qd)]
    return 0.5 * math.fsum(diffs)
