"""Fluid model of the closed processor-sharing network and its entropy Lyapunov function.

States are J x I arrays of nonnegative masses, zero off-route.  At an
occupied queue route ``i`` drains at ``mu_ji * m_ji / m_j``.  At an empty
queue the incoming flow passes straight through, scaled down uniformly when
it exceeds the queue's capacity.

The entropy

    beta(m) = sum_{m_ji > 0} m_ji * log(m_ji * mu_ji / m_j)

never increases along fluid paths and is minimized exactly where all mass
sits at bottlenecks with shares ``mu_ji m_ji / m_j`` equal to the
proportionally fair throughputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from ._kernels import pair_layout
from .model import NetworkModel
from .pfopt import BottleneckReport

__all__ = [
    "FluidError",
    "FluidTrajectory",
    "MembershipReport",
    "ps_rates",
    "net_flow",
    "integrate",
    "entropy",
    "entropy_derivative",
    "descent_bound",
    "optimal_set_membership",
    "uniform_state",
    "random_state",
]


class FluidError(RuntimeError):
    pass


def _as_state(model, m):
    m = model.pair_array(m) if not isinstance(m, np.ndarray) or m.shape != (model.J, model.I) else m
    m = np.where(model.incidence, np.asarray(m, dtype=float), 0.0)
    if np.any(m < 0):
        raise ValueError("fluid masses must be nonnegative")
    return m


def ps_rates(model: NetworkModel, m, *, max_sweeps: int | None = None) -> np.ndarray:
    """Instantaneous departure rates ``lambda_ji`` for a fluid state.

    Occupied queues share service in proportion to mass.  Empty queues pass
    their inflow through, scaled by ``min(1, 1 / load)``; chains and cycles of
    empty queues are resolved by repeated sweeps until the rates stop
    changing.
    """
    m = _as_state(model, m)
    inc = model.incidence
    mu = model.mu
    mj = m.sum(axis=1)
    occ = mj > 0
    lam = np.zeros_like(m)
    lam[occ] = mu[occ] * m[occ] / mj[occ, None]
    empty = ~occ
    if not empty.any():
        return lam
    J, I = m.shape
    prev = np.where(inc, model.prev_matrix, 0)
    cols = np.broadcast_to(np.arange(I), (J, I))
    inv_mu = model.inv_mu
    if max_sweeps is None:
        max_sweeps = 10 * J * I + 10
    for _ in range(max_sweeps):
        inflow = np.where(inc, lam[prev, cols], 0.0)
        load = (inflow * inv_mu).sum(axis=1)
        theta = np.where(load > 1.0, 1.0 / np.maximum(load, 1.0), 1.0)
        new = lam.copy()
        new[empty] = theta[empty, None] * inflow[empty]
        if np.allclose(new, lam, rtol=1e-14, atol=1e-300):
            return new
        lam = new
    bad = [model.queues[j] for j in np.flatnonzero(empty)]
    raise FluidError(f"empty-queue rates did not settle; empty queues {bad}")


def net_flow(model: NetworkModel, lam) -> np.ndarray:
    """Time derivative of the masses: inflow from the previous queue minus outflow."""
    inc = model.incidence
    J, I = lam.shape
    prev = np.where(inc, model.prev_matrix, 0)
    cols = np.broadcast_to(np.arange(I), (J, I))
    return np.where(inc, lam[prev, cols] - lam, 0.0)


def entropy(model: NetworkModel, m) -> float:
    """Entropy Lyapunov function; zero-mass terms contribute nothing."""
    m = _as_state(model, m)
    mj = m.sum(axis=1, keepdims=True)
    pos = m > 0
    terms = np.zeros_like(m)
    terms[pos] = m[pos] * np.log(m[pos] * model.mu[pos] / np.broadcast_to(mj, m.shape)[pos])
    return math.fsum(terms[pos].tolist())


def _shift_next(model, lam):
    J, I = lam.shape
    nxt = np.where(model.incidence, model.next_matrix, 0)
    cols = np.broadcast_to(np.arange(I), (J, I))
    return lam[nxt, cols]


def entropy_derivative(model: NetworkModel, m, lam=None) -> float:
    """``d beta / dt = -sum_i sum_j lam_ji log(lam_ji / lam_{next(j,i), i})``.

    Routes carrying no mass are skipped.  Raises :class:`FluidError` if a
    route with mass has a zero rate somewhere, where the formula does not
    apply.
    """
    m = _as_state(model, m)
    if lam is None:
        lam = ps_rates(model, m)
    nxt = _shift_next(model, lam)
    total = 0.0
    for i in range(model.I):
        col = model.incidence[:, i]
        if m[col, i].sum() <= 0:
            continue
        a, b = lam[col, i], nxt[col, i]
        if np.any(a <= 0):
            raise FluidError(f"route {model.route_ids[i]} has a zero rate; derivative formula undefined")
        total -= float(np.sum(a * np.log(a / b)))
    return total


def descent_bound(model: NetworkModel, lam) -> float:
    """Quadratic upper bound ``-(1/(mu_max J)) sum (lam_ji - lam_{next,i})^2`` on the derivative."""
    nxt = _shift_next(model, lam)
    d = np.where(model.incidence, lam - nxt, 0.0)
    return -float((d**2).sum()) / (model.mu_max * model.J)


@dataclass(eq=False)
class FluidTrajectory:
    model: NetworkModel
    times: np.ndarray
    states: np.ndarray
    rates: np.ndarray
    beta: np.ndarray
    step: float
    route_totals: np.ndarray
    events: int = 0

    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t) -> np.ndarray:
        """States linearly interpolated at times ``t`` (array of shape (len(t), J, I))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        flat = self.states.reshape(len(self.times), -1)
        out = np.empty((len(t), flat.shape[1]))
        for k in range(flat.shape[1]):
            out[:, k] = np.interp(t, self.times, flat[:, k])
        return out.reshape(len(t), *self.states.shape[1:])

    def to_csv(self, beta_star: float | None = None) -> str:
        m = self.model
        cols = ["t", "beta", "beta_gap"] + [f"m_{m.pair_label(j, i)}" for j, i in m.pairs]
        lines = [",".join(cols)]
        for k, t in enumerate(self.times):
            gap = "" if beta_star is None else f"{self.beta[k] - beta_star:.17g}"
            vals = [f"{t:.17g}", f"{self.beta[k]:.17g}", gap]
            vals += [f"{self.states[k, j, i]:.17g}" for j, i in m.pairs]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def integrate(
    model: NetworkModel,
    m0,
    horizon: float,
    step: float | None = None,
    *,
    record_every: int = 1,
    max_events_per_step: int | None = None,
) -> FluidTrajectory:
    """Explicit Euler integration of the fluid equations.

    Steps are cut short at the moment a mass component reaches zero, so
    queues empty exactly instead of overshooting.  After every step masses
    are clamped at zero and each route is rescaled to its initial total.
    The default step is ``1e-3 / mu_max``; every ``record_every``-th grid
    point is stored.
    """
    m = _as_state(model, m0)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if step is None:
        step = 1e-3 / model.mu_max
    if step <= 0:
        raise ValueError("step must be positive")
    lay = pair_layout(model)
    flat = lay.flatten(m)
    totals = m.sum(axis=0)
    dust = 1e-14 * max(totals.sum(), 1e-300)
    if max_events_per_step is None:
        max_events_per_step = 2 * lay.P + 2
    nsteps = int(math.ceil(horizon / step - 1e-9))
    nrec_max = nsteps // record_every + 2
    rec_t = np.zeros(nrec_max)
    rec_m = np.zeros((nrec_max, lay.P))
    rec_lam = np.zeros((nrec_max, lay.P))
    nrec, events, status = _k.fluid_integrate(
        flat, lay.pq, lay.pr, lay.mu, lay.inv_mu, lay.prevp, lay.qptr, lay.qpairs, lay.J, lay.I,
        float(step), float(horizon), nsteps, int(record_every), int(max_events_per_step), dust,
        10 * lay.J * lay.I + 10, rec_t, rec_m, rec_lam,
    )
    if status == 1:
        raise FluidError("empty-queue rates did not settle during integration")
    if status == 2:
        raise FluidError("integration produced non-finite masses")
    states = lay.unflatten(rec_m[:nrec])
    return FluidTrajectory(
        model=model,
        times=rec_t[:nrec].copy(),
        states=states,
        rates=lay.unflatten(rec_lam[:nrec]),
        beta=np.array([entropy(model, x) for x in states]),
        step=step,
        route_totals=totals,
        events=int(events),
    )


@dataclass
class MembershipReport:
    member: bool
    violations: list = field(default_factory=list)
    beta_gap: float = math.nan
    tol: float = 1e-2

    def to_text(self) -> str:
        lines = [f"# tol = {self.tol:.17g}", f"member: {str(self.member).lower()}", f"beta_gap: {self.beta_gap:.17g}"]
        lines += [f"violation: {v}" for v in self.violations]
        return "\n".join(lines) + "\n"


def optimal_set_membership(model: NetworkModel, n, pf: BottleneckReport, m, tol: float = 1e-2) -> MembershipReport:
    """Check whether a fluid state lies (within ``tol``) in the entropy-minimizing set.

    The three conditions: (a) no mass above ``tol`` at non-bottlenecks,
    (b) at every queue holding more than ``tol`` mass the rates
    ``mu_ji m_ji / m_j`` match the optimal throughputs within ``tol``,
    (c) route totals equal ``n`` within ``tol``.
    """
    m = _as_state(model, m)
    n = model.population_array(n)
    lam_star = pf.allocation
    violations = []
    for j in pf.non_bottlenecks:
        mass = m[j].sum()
        if mass > tol:
            violations.append(f"(a) non-bottleneck {model.queues[j]} holds mass {mass:.6g}")
    mj = m.sum(axis=1)
    for j in range(model.J):
        if mj[j] <= tol:
            continue
        for i in model.routes_at(j):
            if n[i] == 0:
                continue
            r = model.mu[j, i] * m[j, i] / mj[j]
            if abs(r - lam_star[i]) > tol:
                violations.append(
                    f"(b) queue {model.queues[j]} route {model.route_ids[i]}: rate {r:.6g} vs {lam_star[i]:.6g}"
                )
    tot = m.sum(axis=0)
    for i in range(model.I):
        if abs(tot[i] - n[i]) > tol:
            violations.append(f"(c) route {model.route_ids[i]} total {tot[i]:.6g} vs {n[i]:.6g}")
    gap = entropy(model, m) - float(np.dot(n[n > 0], np.log(lam_star[n > 0])))
    return MembershipReport(not violations, violations, gap, tol)


def uniform_state(model: NetworkModel, n=None) -> np.ndarray:
    """Each route's mass split evenly over its queues."""
    n = model.population_array(n)
    m = np.zeros((model.J, model.I))
    for i, r in enumerate(model.routes):
        m[list(r), i] = n[i] / len(r)
    return m


def random_state(model: NetworkModel, n, rng) -> np.ndarray:
    """Each route's mass split by a flat Dirichlet draw."""
    n = model.population_array(n)
    m = np.zeros((model.J, model.I))
    for i, r in enumerate(model.routes):
        m[list(r), i] = n[i] * rng.dirichlet(np.ones(len(r)))
    return m
