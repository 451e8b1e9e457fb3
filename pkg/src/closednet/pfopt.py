"""Proportionally fair throughputs, bottlenecks and the open-network approximation.

For a population direction ``n`` the limiting throughputs solve

    maximize   sum_i n_i log(L_i)
    subject to sum_{i at j} L_i / mu_ji <= 1   for every queue j.

Queues whose capacity constraint is slack at the optimum behave, in the
large-population limit, like queues of an open network fed by independent
Poisson streams of rates ``L``; their counts are geometric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .exact import StateDistribution, _compositions
from .model import NetworkModel

__all__ = [
    "ConvergenceError",
    "BottleneckReport",
    "KKTResiduals",
    "solve_pf",
    "classify_bottlenecks",
    "kkt_residuals",
    "open_marginal",
    "open_log_pmf",
    "open_means",
    "optimal_fluid_state",
    "DEFAULT_EPS_BOTTLENECK",
]

DEFAULT_EPS_BOTTLENECK = 1e-6


class ConvergenceError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal: float
    complementarity: float
    multipliers: np.ndarray = field(repr=False)

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass(frozen=True, eq=False)
class BottleneckReport:
    """Solution of the proportional-fairness program and its classification.

    ``multipliers`` are the capacity prices per queue, scaled to ``n``; they
    are also the queue masses of an optimal fluid state (see
    :func:`optimal_fluid_state`).
    """

    model: NetworkModel
    population: np.ndarray
    allocation: np.ndarray
    utilizations: np.ndarray
    bottlenecks: tuple
    non_bottlenecks: tuple
    beta_star: float
    multipliers: np.ndarray
    residuals: KKTResiduals
    eps_bottleneck: float
    dropped_routes: tuple = ()
    iterations: int = 0

    @property
    def slacks(self) -> np.ndarray:
        return 1.0 - self.utilizations

    def to_text(self) -> str:
        m = self.model
        lines = [
            f"# eps_bottleneck = {self.eps_bottleneck:.17g}",
            "allocation:",
            *[f"  {r}: {x:.17g}" for r, x in zip(m.route_ids, self.allocation)],
            "utilizations:",
            *[f"  {q}: {u:.17g}" for q, u in zip(m.queues, self.utilizations)],
            "bottlenecks: " + ", ".join(m.queues[j] for j in self.bottlenecks),
            "non_bottlenecks: " + ", ".join(m.queues[j] for j in self.non_bottlenecks),
            f"beta_star: {self.beta_star:.17g}",
            "residuals:",
            f"  stationarity: {self.residuals.stationarity:.3e}",
            f"  primal: {self.residuals.primal:.3e}",
            f"  complementarity: {self.residuals.complementarity:.3e}",
        ]
        if self.dropped_routes:
            lines.append("dropped_routes (zero population): " + ", ".join(m.route_ids[i] for i in self.dropped_routes))
        return "\n".join(lines) + "\n"


# -- solver ------------------------------------------------------------------


def _barrier(w, A, x, t, max_newton=200):
    """Newton's method on -sum w log x - t sum log(1 - A x) from a strictly feasible x."""
    iters = 0
    for _ in range(max_newton):
        s = 1.0 - A @ x
        g = -w / x + t * (A.T @ (1.0 / s))
        H = np.diag(w / x**2) + t * (A.T * (1.0 / s**2)) @ A
        try:
            dx = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec = -g @ dx
        iters += 1
        if dec < 1e-24:
            break
        f0 = -w @ np.log(x) - t * np.log(s).sum()
        step = 1.0
        # stay strictly inside the domain
        neg = dx < 0
        if neg.any():
            step = min(step, 0.99 * np.min(-x[neg] / dx[neg]))
        Adx = A @ dx
        pos = Adx > 0
        if pos.any():
            step = min(step, 0.99 * np.min(s[pos] / Adx[pos]))
        while True:
            xn = x + step * dx
            sn = 1.0 - A @ xn
            if np.all(xn > 0) and np.all(sn > 0):
                fn = -w @ np.log(xn) - t * np.log(sn).sum()
                if fn <= f0 - 0.25 * step * dec or step < 1e-14:
                    break
            step *= 0.5
        x = xn
        if dec < 1e-20:
            break
    return x, iters


def _polish(w, A, x, active):
    """Newton on the equality-constrained problem with the active constraints tight."""
    Aa = A[active]
    k = Aa.shape[0]
    y = x.copy()
    for _ in range(50):
        # linearized KKT: H dy + Aa^T nu = w / y,  Aa dy = 1 - Aa y
        H = np.diag(w / y**2)
        K = np.block([[H, Aa.T], [Aa, np.zeros((k, k))]])
        rhs = np.concatenate([w / y, 1.0 - Aa @ y])
        dy = np.linalg.lstsq(K, rhs, rcond=None)[0][: len(y)]
        step = 1.0
        neg = dy < 0
        if neg.any():
            step = min(1.0, 0.9 * np.min(-y[neg] / dy[neg]))
        y = y + step * dy
        if np.max(np.abs(dy)) <= 1e-15 * max(1.0, np.max(np.abs(y))):
            break
    return y


def _multipliers(w, A, x, tight):
    """Nonnegative prices on the tight constraints best explaining w/x = A^T lam."""
    lam = np.zeros(A.shape[0])
    target = w / x
    if tight.any():
        sol, _ = nnls(A[tight].T, target)
        lam[tight] = sol
    return lam


def _residuals(w, A, x, tight_tol=1e-9):
    s = 1.0 - A @ x
    tight = s <= tight_tol
    lam = _multipliers(w, A, x, tight)
    target = w / x
    scale = max(np.max(np.abs(target)), 1e-300)
    stat = float(np.max(np.abs(target - A.T @ lam)) / scale)
    primal = float(max(0.0, -s.min()))
    comp = float(np.abs(lam * s).sum() / max(w.sum(), 1e-300))
    return KKTResiduals(stat, primal, comp, lam)


def kkt_residuals(model: NetworkModel, n, allocation) -> KKTResiduals:
    """Optimality residuals of an allocation for the proportional-fairness program.

    ``stationarity`` is the relative sup-norm misfit of ``n_i / L_i`` by
    nonnegative prices on constraints within 1e-9 of tight (or violated);
    ``primal`` the largest capacity overshoot ``max_j (U_j - 1)^+``;
    ``complementarity`` the price-weighted slack ``sum_j lam_j |1 - U_j|``
    relative to ``sum n``.  Routes with ``n_i = 0`` are ignored.
    """
    n = model.population_array(n)
    lam_alloc = np.asarray(allocation, dtype=float)
    keep = n > 0
    A = model.inv_mu[:, keep]
    x = lam_alloc[keep]
    if np.any(x <= 0):
        raise ValueError("allocation must be positive on routes with customers")
    res = _residuals(n[keep], A, x)
    primal = float(max(0.0, (model.inv_mu @ lam_alloc - 1.0).max()))
    return KKTResiduals(res.stationarity, primal, res.complementarity, res.multipliers)


def solve_pf(
    model: NetworkModel,
    n=None,
    *,
    eps_bottleneck: float = DEFAULT_EPS_BOTTLENECK,
    x0=None,
    tol: float = 1e-10,
    max_iter: int = 10**5,
) -> BottleneckReport:
    """Proportionally fair allocation, bottleneck set and dual value.

    A log-barrier Newton method approaches the optimum from the interior;
    the constraints found tight are then enforced exactly by a Newton polish.
    ``x0`` optionally gives a strictly feasible starting allocation.
    """
    n = model.population_array(n)
    if not np.any(n > 0):
        raise ValueError("population is zero on every route")
    keep = np.flatnonzero(n > 0)
    dropped = tuple(int(i) for i in np.flatnonzero(n == 0))
    w = n[keep] / n[keep].sum()
    A = model.inv_mu[:, keep]
    if x0 is None:
        # min_j mu_ji / (I + 1) is strictly feasible
        mu = model.mu[:, keep]
        x = np.array([mu[model.incidence[:, i], k].min() for k, i in enumerate(keep)]) / (len(keep) + 1)
    else:
        x = np.asarray(x0, dtype=float)
        x = x[keep] if x.size == model.I else x
        if np.any(x <= 0) or np.any(A @ x >= 1):
            raise ValueError("x0 must be strictly feasible")
    t = 1.0
    iters = 0
    while True:
        x, k = _barrier(w, A, x, t)
        iters += k
        if iters > max_iter:
            break
        if t < 1e-13:
            break
        t *= 0.1
    s = 1.0 - A @ x
    active = s < max(1e-7, 1e3 * tol)
    best = x
    best_res = _residuals(w, A, x)
    if active.any():
        y = _polish(w, A, x, active)
        if np.all(y > 0):
            # clip roundoff overshoot on active constraints
            over = (A @ y).max()
            if over > 1.0:
                y = y / over
            res = _residuals(w, A, y)
            if res.max() <= best_res.max():
                best, best_res = y, res
    if best_res.max() > max(tol, 1e-8):
        raise ConvergenceError(
            f"proportional-fairness solver did not converge (residual {best_res.max():.2e})", best_res
        )
    alloc = np.zeros(model.I)
    alloc[keep] = best
    util = model.inv_mu @ alloc
    bott, nonb = classify_bottlenecks(util, eps_bottleneck)
    beta_star = float(np.dot(n[keep], np.log(best)))
    total = n[keep].sum()
    res = KKTResiduals(best_res.stationarity, best_res.primal, best_res.complementarity, best_res.multipliers * total)
    return BottleneckReport(
        model=model,
        population=n,
        allocation=alloc,
        utilizations=util,
        bottlenecks=bott,
        non_bottlenecks=nonb,
        beta_star=beta_star,
        multipliers=best_res.multipliers * total,
        residuals=res,
        eps_bottleneck=eps_bottleneck,
        dropped_routes=dropped,
        iterations=iters,
    )


def classify_bottlenecks(utilizations, eps_bottleneck: float = DEFAULT_EPS_BOTTLENECK):
    """Split queues by slack: ``1 - U_j < eps`` is a bottleneck."""
    u = np.asarray(utilizations, dtype=float)
    slack = 1.0 - u
    bott = tuple(int(j) for j in np.flatnonzero(slack < eps_bottleneck))
    nonb = tuple(int(j) for j in np.flatnonzero(slack >= eps_bottleneck))
    return bott, nonb


def optimal_fluid_state(report: BottleneckReport) -> np.ndarray:
    """A fluid state of least entropy: mass ``lam_j L_i / mu_ji`` at bottleneck j."""
    m = report.model
    return report.multipliers[:, None] * m.inv_mu * report.allocation[None, :]


# -- open network ------------------------------------------------------------


def _load(model, allocation, j):
    return float(model.inv_mu[j] @ np.asarray(allocation, dtype=float))


def open_log_pmf(model: NetworkModel, allocation, j, counts) -> float:
    """Log probability of per-route counts at queue ``j`` in the open network.

    ``counts`` maps each route at ``j`` (in :meth:`NetworkModel.routes_at`
    order) to a count.
    """
    j = model.queue_index(j)
    lam = np.asarray(allocation, dtype=float)
    u = _load(model, lam, j)
    if u >= 1:
        raise ValueError(f"queue {model.queues[j]} has load {u:.6g} >= 1; no stationary distribution")
    routes = model.routes_at(j)
    counts = [int(c) for c in counts]
    total = sum(counts)
    out = math.log1p(-u) + math.lgamma(total + 1)
    for i, k in zip(routes, counts):
        out -= math.lgamma(k + 1)
        if k:
            rho = lam[i] / model.mu[j, i]
            if rho == 0:
                return -math.inf
            out += k * math.log(rho)
    return out


def open_marginal(allocation, model: NetworkModel, j, *, tail: float = 1e-13, max_total: int | None = None):
    """Distribution of the per-route counts at queue ``j`` fed by Poisson streams.

    The support is truncated at the total count ``K`` where the geometric
    tail ``U_j ** (K + 1)`` falls below ``tail``; the neglected mass is
    stored as ``truncated_mass``.
    """
    j = model.queue_index(j)
    lam = np.asarray(allocation, dtype=float)
    u = _load(model, lam, j)
    if u >= 1:
        raise ValueError(f"queue {model.queues[j]} has load {u:.6g} >= 1; no stationary distribution")
    routes = model.routes_at(j)
    if max_total is None:
        max_total = 0 if u == 0 else max(0, math.ceil(math.log(tail) / math.log(u)))
    states, probs = [], []
    for total in range(max_total + 1):
        for comp in _compositions(total, len(routes)):
            lp = open_log_pmf(model, lam, j, comp)
            if lp == -math.inf:
                continue
            states.append(comp)
            probs.append(math.exp(lp))
    pairs = tuple((j, i) for i in routes)
    dist = StateDistribution(pairs, tuple(states), np.array(probs))
    object.__setattr__(dist, "truncated_mass", u ** (max_total + 1))
    return dist


def open_means(allocation, model: NetworkModel, queues) -> np.ndarray:
    """Mean per-route counts ``(L_i / mu_ji) / (1 - U_j)`` at the given queues (J x I)."""
    lam = np.asarray(allocation, dtype=float)
    out = np.zeros((model.J, model.I))
    for j in model.queue_set(queues):
        u = _load(model, lam, j)
        if u >= 1:
            raise ValueError(f"queue {model.queues[j]} has load {u:.6g} >= 1")
        for i in model.routes_at(j):
            out[j, i] = lam[i] / model.mu[j, i] / (1.0 - u)
    return out
