"""Exact product-form quantities: normalizing constants and what follows from them.

The unnormalized weight of a state ``m`` (per-queue, per-route counts) is

    prod_j  multinomial(m_j; m_ji) * prod_i mu_ji ** (-m_ji)

and ``B(n)`` is the sum of the weights over all states with route totals
``n``.  Its generating function is ``prod_j 1 / (1 - sum_{i at j} z_i/mu_ji)``,
so adding queue ``j`` to a table ``b`` means solving

    b_new(v) = b_old(v) + sum_{i at j} b_new(v - e_i) / mu_ji

over the population lattice.  Tables are kept as natural logs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import gammaln

from .model import ModelError, NetworkModel

__all__ = [
    "MemoryBudgetError",
    "StateSpaceError",
    "NormConstTable",
    "StateDistribution",
    "DEFAULT_MEMORY_BUDGET",
    "normalizing_table",
    "subnetwork_log_table",
    "exact_normalizing_constants",
    "throughput",
    "utilization",
    "marginal_distribution",
    "mean_queue_lengths",
    "replica_log_table",
    "empty_probability",
    "brute_force_distribution",
    "state_space_size",
    "log_state_weight",
    "table_to_csv",
]

DEFAULT_MEMORY_BUDGET = 2 * 1024**3


class MemoryBudgetError(MemoryError):
    """A population lattice would exceed the configured memory budget."""


class StateSpaceError(ValueError):
    """Enumeration requested over a state space larger than the cap."""


@dataclass(frozen=True, eq=False)
class NormConstTable:
    """``logb[v] = log B(v)`` for every ``0 <= v <= cap`` componentwise."""

    model: NetworkModel
    cap: tuple
    logb: np.ndarray

    def log_b(self, v) -> float:
        v = tuple(int(x) for x in v)
        if len(v) != len(self.cap) or any(x < 0 or x > c for x, c in zip(v, self.cap)):
            raise IndexError(f"population {v} outside table range 0..{self.cap}")
        return float(self.logb[v])

    def B(self, v) -> float:
        return math.exp(self.log_b(v))


@dataclass(frozen=True, eq=False)
class StateDistribution:
    """A finite distribution over count vectors on a fixed list of (queue, route) pairs."""

    pairs: tuple
    states: tuple
    probs: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.probs):
            raise ValueError("states and probabilities differ in length")

    def as_dict(self) -> dict:
        return dict(zip(self.states, self.probs.tolist()))

    def total(self) -> float:
        return math.fsum(self.probs.tolist())

    def marginal(self, pairs) -> "StateDistribution":
        """Marginalize onto a subset of this distribution's pairs."""
        pairs = tuple(pairs)
        pos = [self.pairs.index(p) for p in pairs]
        acc: dict = {}
        for s, p in zip(self.states, self.probs.tolist()):
            key = tuple(s[k] for k in pos)
            acc[key] = acc.get(key, 0.0) + p
        keys = sorted(acc)
        return StateDistribution(pairs, tuple(keys), np.array([acc[k] for k in keys]))

    def mean(self) -> np.ndarray:
        """Mean count on each pair."""
        if not self.states:
            return np.zeros(len(self.pairs))
        return np.asarray(self.states, dtype=float).T @ self.probs


# -- lattice machinery -------------------------------------------------------


def _check_budget(cap, budget, copies=2):
    size = 1
    for c in cap:
        size *= int(c) + 1
    need = 8 * size * copies
    if budget is not None and need > budget:
        raise MemoryBudgetError(
            f"table for cap {tuple(cap)} needs {need / 2**20:.1f} MiB, budget {budget / 2**20:.1f} MiB"
        )


def _solve_shift(y, axes, log_a):
    """log of (1 - sum_k a_k S_k)^{-1} applied to exp(y), S_k the unit shift on axes[k]."""
    ax0, la0 = axes[0], log_a[0]
    n0 = y.shape[ax0]
    if len(axes) == 1:
        w = np.arange(n0, dtype=float).reshape([-1 if d == ax0 else 1 for d in range(y.ndim)])
        with np.errstate(invalid="ignore"):
            acc = np.logaddexp.accumulate(y - w * la0, axis=ax0)
        out = acc + w * la0
        out[np.isnan(out)] = -np.inf
        return out
    out = np.empty_like(y)
    rest_axes = [a if a < ax0 else a - 1 for a in axes[1:]]
    for k in range(n0):
        yk = np.take(y, k, axis=ax0)
        if k > 0:
            yk = np.logaddexp(yk, la0 + np.take(out, k - 1, axis=ax0))
        idx = [slice(None)] * y.ndim
        idx[ax0] = k
        out[tuple(idx)] = _solve_shift(yk, rest_axes, log_a[1:])
    return out


def _add_queue(logb, model, j):
    routes = model.routes_at(j)
    # shorter axes first keeps the python-level loop small
    routes = sorted(routes, key=lambda i: logb.shape[i])
    routes = [i for i in routes if logb.shape[i] > 1]
    if not routes:
        return logb
    # iterate outer loops over the short axes; accumulate along the longest
    order = routes[:-1] + routes[-1:]
    log_a = [-math.log(model.mu[j, i]) for i in order]
    return _solve_shift(logb, order, log_a)


def _delta_table(cap):
    logb = np.full(tuple(int(c) + 1 for c in cap), -np.inf)
    logb[(0,) * len(cap)] = 0.0
    return logb


def subnetwork_log_table(model: NetworkModel, queues, cap, *, memory_budget=DEFAULT_MEMORY_BUDGET):
    """Log normalizing constants of the network restricted to ``queues``.

    Routes with no queue in the subset contribute only the empty state, so
    entries with a positive count on such a route are ``-inf``.  With
    ``queues`` the complement of a set ``S`` this is the constant of the
    network with ``S`` removed.
    """
    cap = tuple(int(c) for c in cap)
    _check_budget(cap, memory_budget)
    logb = _delta_table(cap)
    for j in model.queue_set(queues):
        logb = _add_queue(logb, model, j)
    return logb


def normalizing_table(model: NetworkModel, n, *, memory_budget=DEFAULT_MEMORY_BUDGET) -> NormConstTable:
    """Table of ``log B(v)`` for all ``v <= n``, by queue-by-queue convolution.

    Raises :class:`MemoryBudgetError` if the lattice ``prod(n_i + 1)`` does not
    fit in ``memory_budget`` bytes.
    """
    cap = tuple(int(x) for x in model.population_array(n, integer=True))
    logb = subnetwork_log_table(model, range(model.J), cap, memory_budget=memory_budget)
    logb.setflags(write=False)
    return NormConstTable(model, cap, logb)


def replica_log_table(table: NormConstTable, j) -> np.ndarray:
    """Log constants of the network with a replica of queue ``j`` added.

    The constant does not depend on where a queue sits on its routes, so
    this equals ``normalizing_table(replicate_queue(model, j), cap)``.
    """
    return _add_queue(np.array(table.logb), table.model, table.model.queue_index(j))


def exact_normalizing_constants(model: NetworkModel, n, *, max_points=10**4) -> np.ndarray:
    """Rational ``B(v)`` for all ``v <= n`` (object array of Fractions).

    Rates are converted with ``Fraction(rate)``, exact for ints and floats.
    Limited to ``max_points`` lattice points.
    """
    cap = tuple(int(x) for x in model.population_array(n, integer=True))
    shape = tuple(c + 1 for c in cap)
    if math.prod(shape) > max_points:
        raise MemoryBudgetError(f"exact mode limited to {max_points} lattice points")
    table = np.empty(shape, dtype=object)
    table.fill(Fraction(0))
    table[(0,) * len(cap)] = Fraction(1)
    for j in range(model.J):
        inv = {i: 1 / Fraction(model.rates[(j, i)]) for i in model.routes_at(j)}
        for v in itertools.product(*(range(s) for s in shape)):
            acc = table[v]
            for i, a in inv.items():
                if v[i] > 0:
                    w = list(v)
                    w[i] -= 1
                    acc += a * table[tuple(w)]
            table[v] = acc
    return table


# -- derived quantities ------------------------------------------------------


def _index(table, n):
    n = table.model.population_array(n, integer=True)
    if any(x > c for x, c in zip(n, table.cap)):
        raise IndexError(f"population {tuple(n)} outside table range 0..{table.cap}")
    return n


def throughput(table: NormConstTable, n=None) -> np.ndarray:
    """Per-route throughputs ``B(n - e_i) / B(n)``; zero for empty routes."""
    n = _index(table, table.cap if n is None else n)
    lb = table.logb[tuple(n)]
    out = np.zeros(len(n))
    for i, ni in enumerate(n):
        if ni > 0:
            v = n.copy()
            v[i] -= 1
            out[i] = math.exp(table.logb[tuple(v)] - lb)
    return out


def utilization(model: NetworkModel, table: NormConstTable, n=None) -> np.ndarray:
    """Per-queue utilizations ``sum_i Lambda_i / mu_ji``."""
    lam = throughput(table, n)
    return model.inv_mu @ lam


def empty_probability(model: NetworkModel, n, subset, table: NormConstTable | None = None) -> float:
    """Stationary probability that every queue in ``subset`` is empty.

    Equals ``Bbar(n) / B(n)`` with ``Bbar`` the constant of the network with
    ``subset`` removed.  A route left without queues contributes only its
    empty state, so the probability is 0 when such a route has customers.
    """
    subset = set(model.queue_set(subset))
    if not subset:
        return 1.0
    keep = [j for j in range(model.J) if j not in subset]
    n = model.population_array(n, integer=True)
    if table is None:
        table = normalizing_table(model, n)
    rest = subnetwork_log_table(model, keep, n)
    return math.exp(rest[tuple(n)] - table.log_b(n))


def mean_queue_lengths(model: NetworkModel, n, table: NormConstTable | None = None) -> np.ndarray:
    """Exact ``E M_ji(n)`` as a J x I array (zero off-route).

    Uses ``E M_ji(n) = B^{+j}(n - e_i) / (mu_ji B(n))`` where ``B^{+j}`` is
    the constant of the network with a replica of queue ``j``.
    """
    n = model.population_array(n, integer=True)
    if table is None:
        table = normalizing_table(model, n)
    lb = table.log_b(n)
    out = np.zeros((model.J, model.I))
    for j in range(model.J):
        plus = replica_log_table(table, j)
        for i in model.routes_at(j):
            if n[i] == 0:
                continue
            v = n.copy()
            v[i] -= 1
            out[j, i] = math.exp(plus[tuple(v)] - lb) / model.mu[j, i]
    return out


def log_state_weight(model: NetworkModel, m) -> float:
    """Log of the unnormalized product-form weight of a full or partial state.

    ``m`` is a J x I count array; queues with no customers contribute 0.
    """
    m = np.asarray(m, dtype=float)
    mj = m.sum(axis=1)
    logw = gammaln(mj + 1).sum() - gammaln(m + 1).sum()
    inc = model.incidence
    return float(logw - (m[inc] * np.log(model.mu[inc])).sum())


def _compositions(total, parts):
    """All ways to write ``total`` as an ordered sum of ``parts`` nonnegative ints."""
    if parts == 1:
        yield (total,)
        return
    for k in range(total + 1):
        for rest in _compositions(total - k, parts - 1):
            yield (k,) + rest


def state_space_size(model: NetworkModel, n) -> int:
    n = model.population_array(n, integer=True)
    return math.prod(math.comb(int(n[i]) + len(r) - 1, len(r) - 1) for i, r in enumerate(model.routes))


def _enumerate_states(model, n):
    """Yield J x I count arrays over the state space with route totals n."""
    per_route = []
    for i, r in enumerate(model.routes):
        per_route.append([(i, r, comp) for comp in _compositions(int(n[i]), len(r))])
    for combo in itertools.product(*per_route):
        m = np.zeros((model.J, model.I), dtype=np.int64)
        for i, r, comp in combo:
            for j, k in zip(r, comp):
                m[j, i] = k
        yield m


def brute_force_distribution(model: NetworkModel, n, *, max_states=10**6) -> StateDistribution:
    """Stationary distribution by enumerating every state.  Test oracle.

    The returned object carries ``log_normalizer``, the log of the summed
    weights, for comparison with :func:`normalizing_table`.
    """
    n = model.population_array(n, integer=True)
    size = state_space_size(model, n)
    if size > max_states:
        raise StateSpaceError(f"state space has {size} states, cap is {max_states}")
    pairs = model.pairs
    states, logw = [], []
    for m in _enumerate_states(model, n):
        states.append(tuple(int(m[j, i]) for j, i in pairs))
        logw.append(log_state_weight(model, m))
    logw = np.array(logw)
    top = logw.max()
    w = np.exp(logw - top)
    total = math.fsum(w.tolist())
    dist = StateDistribution(pairs, tuple(states), w / total)
    object.__setattr__(dist, "log_normalizer", top + math.log(total))
    return dist


def marginal_distribution(model: NetworkModel, n, subset, *, table=None, max_states=10**6) -> StateDistribution:
    """Exact joint distribution of the per-route counts at the queues in ``subset``.

    Each feasible ``m°`` on the subset gets probability
    ``weight(m°) * Brest(n - n°) / B(n)``, where ``Brest`` is the constant of
    the remaining queues and ``n°`` the route totals held in the subset.
    """
    subset = model.queue_set(subset)
    if not subset:
        raise ModelError("subset must be nonempty")
    n = model.population_array(n, integer=True)
    if table is None:
        table = normalizing_table(model, n)
    rest = [j for j in range(model.J) if j not in subset]
    rest_log = subnetwork_log_table(model, rest, n)
    pairs = tuple((j, i) for j, i in model.pairs if j in subset)
    # per-route compositions of at most n_i over the subset queues on that route
    per_route = []
    for i in range(model.I):
        qs = [j for j in model.routes[i] if j in subset]
        if not qs:
            per_route.append([()])
            continue
        opts = []
        for tot in range(int(n[i]) + 1):
            opts.extend(_compositions(tot, len(qs)))
        per_route.append(opts)
    count = math.prod(len(o) for o in per_route)
    if count > max_states:
        raise StateSpaceError(f"marginal support has {count} states, cap is {max_states}")
    lb = table.log_b(n)
    states, probs = [], []
    for combo in itertools.product(*per_route):
        m = np.zeros((model.J, model.I), dtype=np.int64)
        n_sub = np.zeros(model.I, dtype=np.int64)
        for i, comp in enumerate(combo):
            qs = [j for j in model.routes[i] if j in subset]
            for j, k in zip(qs, comp):
                m[j, i] = k
            n_sub[i] = sum(comp)
        lr = rest_log[tuple(n - n_sub)]
        if lr == -np.inf:
            continue
        states.append(tuple(int(m[j, i]) for j, i in pairs))
        probs.append(math.exp(log_state_weight(model, m) + lr - lb))
    return StateDistribution(pairs, tuple(states), np.array(probs))


def table_to_csv(table: NormConstTable) -> str:
    """CSV with columns ``n_<route>..., logB``; 17 significant digits."""
    head = ",".join([f"n_{r}" for r in table.model.route_ids] + ["logB"])
    lines = [head]
    for v in itertools.product(*(range(c + 1) for c in table.cap)):
        lines.append(",".join([str(x) for x in v] + [f"{table.logb[v]:.17g}"]))
    return "\n".join(lines) + "\n"
