"""Convergence sweeps along ``c * n`` and cross-method comparison.

A sweep solves the exact network at populations ``round(c * n)`` for a list
of scales and reports how far throughputs, non-bottleneck mean queue
lengths and non-bottleneck marginals are from their proportionally fair
and open-network limits.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import exact, fluid, pfopt, sim
from .model import ModelError, NetworkModel

__all__ = [
    "SweepSpec",
    "SweepRow",
    "SweepResult",
    "parse_scales",
    "open_approximation_tv",
    "nonbottleneck_means",
    "run_sweep",
    "Comparison",
    "compare_methods",
]


def parse_scales(text: str) -> list:
    """``"a:b"`` (integers a..b), ``"a:b:s"`` (step s) or a comma list."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [int(x) for x in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            a, b = parts[0], parts[1]
            s = parts[2] if len(parts) == 3 else 1
            if s <= 0:
                raise ValueError
            scales = list(range(a, b + 1, s))
        else:
            scales = [float(x) if "." in x or "e" in x.lower() else int(x) for x in text.split(",")]
    except ValueError:
        raise ModelError(f"cannot parse scales {text!r}", field="scales") from None
    return scales


@dataclass(frozen=True)
class SweepSpec:
    """Scales and a population direction; populations are ``c * n`` rounded to nearest per route."""

    model: NetworkModel
    direction: tuple
    scales: tuple

    def __post_init__(self):
        if not self.scales:
            raise ModelError("no scales given", field="scales")
        if any(c <= 0 for c in self.scales):
            raise ModelError("scales must be positive", field="scales")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ModelError("scales must be strictly increasing", field="scales")
        if any(x < 0 for x in self.direction) or not any(x > 0 for x in self.direction):
            raise ModelError("direction must be nonnegative and nonzero", field="population")

    @classmethod
    def build(cls, model, direction, scales):
        d = model.population_array(direction)
        return cls(model, tuple(float(x) for x in d), tuple(scales))

    def population(self, c) -> np.ndarray:
        return np.floor(c * np.asarray(self.direction) + 0.5).astype(np.int64)


def open_approximation_tv(model: NetworkModel, n, queues, allocation, table=None) -> float:
    """Total variation between the exact joint law of ``queues`` and the product-geometric law.

    Both laws are proportional to the product-form weight of the subnetwork
    state times a factor that depends only on the per-route totals ``v``
    held in the subnetwork, so the distance reduces to a sum over ``v``:
    exact mass ``A(v) Brest(n - v) / B(n)`` against
    ``A(v) prod_j (1 - U_j) prod_i Lambda_i^{v_i}``.  Open-law mass at totals
    beyond ``n`` is counted as disagreement.
    """
    n = model.population_array(n, integer=True)
    S = model.queue_set(queues)
    if table is None:
        table = exact.normalizing_table(model, n)
    rest = [j for j in range(model.J) if j not in S]
    log_a = exact.subnetwork_log_table(model, S, n)
    log_rest = exact.subnetwork_log_table(model, rest, n)
    flipped = log_rest[tuple(slice(None, None, -1) for _ in n)]
    allocation = np.asarray(allocation, dtype=float)
    util = model.inv_mu[list(S)] @ allocation
    if np.any(util >= 1):
        raise ValueError("open approximation needs utilization below 1 at every queue")
    p = log_a + flipped - table.log_b(n)
    q = log_a + float(np.log1p(-util).sum())
    grids = np.indices(log_a.shape)
    with np.errstate(divide="ignore"):
        log_lam = np.log(allocation)
    for i in range(len(n)):
        q = q + np.where(grids[i] > 0, grids[i] * log_lam[i], 0.0)
    P, Q = np.exp(p), np.exp(q)
    return float(0.5 * np.abs(P - Q).sum() + 0.5 * max(0.0, 1.0 - Q.sum()))


def nonbottleneck_means(model: NetworkModel, n, queues, table) -> dict:
    """Exact ``E M_ji`` for the pairs at ``queues``, keyed by (j, i)."""
    n = model.population_array(n, integer=True)
    lb = table.log_b(n)
    out = {}
    for j in model.queue_set(queues):
        plus = exact.replica_log_table(table, j)
        for i in model.routes_at(j):
            if n[i] == 0:
                out[(j, i)] = 0.0
                continue
            v = n.copy()
            v[i] -= 1
            out[(j, i)] = math.exp(plus[tuple(v)] - lb) / model.mu[j, i]
    return out


@dataclass
class SweepRow:
    c: float
    population: tuple
    status: str
    log_b: float = math.nan
    throughput: np.ndarray | None = None
    throughput_gap: np.ndarray | None = None
    means: dict = field(default_factory=dict)
    mean_gap: dict = field(default_factory=dict)
    tv_open: float = math.nan


@dataclass
class SweepResult:
    spec: SweepSpec
    report: pfopt.BottleneckReport
    open_means: dict
    rows: list

    def ok_rows(self) -> list:
        return [r for r in self.rows if r.status == "ok"]

    def to_csv(self) -> str:
        """One row per scale; gaps are absolute for throughputs and relative for means."""
        m = self.spec.model
        nb_pairs = sorted(self.open_means)
        head = ["c", "status"] + [f"n_{r}" for r in m.route_ids] + ["logB"]
        head += [f"lambda_{r}" for r in m.route_ids] + [f"lambda_gap_{r}" for r in m.route_ids]
        head += [f"em_{m.pair_label(*p)}" for p in nb_pairs] + [f"em_relgap_{m.pair_label(*p)}" for p in nb_pairs]
        head += ["tv_open"]
        r0 = self.report
        lines = [
            f"# eps_bottleneck = {r0.eps_bottleneck:.17g}",
            "# lambda_star = " + " ".join(f"{x:.17g}" for x in r0.allocation),
            "# bottlenecks = " + " ".join(m.queues[j] for j in r0.bottlenecks),
            "# rounding = nearest integer per route",
            ",".join(head),
        ]

        def f(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.17g}"

        for row in self.rows:
            vals = [f"{row.c:.17g}" if isinstance(row.c, float) else str(row.c), row.status]
            vals += [str(x) for x in row.population] + [f(row.log_b)]
            for arr in (row.throughput, row.throughput_gap):
                vals += [f(float(x)) for x in arr] if arr is not None else [""] * m.I
            vals += [f(row.means.get(p)) for p in nb_pairs] + [f(row.mean_gap.get(p)) for p in nb_pairs]
            vals.append(f(row.tv_open))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def _sweep_row(spec, report, open_mean, c, memory_budget):
    model = spec.model
    n = spec.population(c)
    row = SweepRow(c, tuple(int(x) for x in n), "ok")
    try:
        table = exact.normalizing_table(model, n, memory_budget=memory_budget)
    except exact.MemoryBudgetError:
        row.status = "memory_budget"
        return row
    row.log_b = table.log_b(n)
    lam = exact.throughput(table, n)
    row.throughput = lam
    row.throughput_gap = np.abs(lam - report.allocation)
    nb = list(report.non_bottlenecks)
    if nb:
        row.means = nonbottleneck_means(model, n, nb, table)
        row.mean_gap = {
            p: (abs(row.means[p] - open_mean[p]) / open_mean[p] if open_mean[p] > 0 else abs(row.means[p]))
            for p in row.means
        }
        row.tv_open = open_approximation_tv(model, n, nb, report.allocation, table)
    return row


def run_sweep(
    spec: SweepSpec,
    *,
    eps_bottleneck: float = pfopt.DEFAULT_EPS_BOTTLENECK,
    memory_budget: int = exact.DEFAULT_MEMORY_BUDGET,
    workers: int = 1,
) -> SweepResult:
    """Exact quantities at each scale against the limits from the fluid optimization.

    With ``workers > 1`` rows are computed in separate processes; output
    order always follows the scale list.
    """
    model = spec.model
    report = pfopt.solve_pf(model, spec.direction, eps_bottleneck=eps_bottleneck)
    om = pfopt.open_means(report.allocation, model, report.non_bottlenecks)
    open_mean = {(j, i): float(om[j, i]) for j in report.non_bottlenecks for i in model.routes_at(j)}
    args = [(spec, report, open_mean, c, memory_budget) for c in spec.scales]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_row, *zip(*args)))
    else:
        rows = [_sweep_row(*a) for a in args]
    return SweepResult(spec, report, open_mean, rows)


# -- cross-method comparison -----------------------------------------------


@dataclass
class Comparison:
    """Bottleneck sets and per-route throughputs from four methods."""

    model: NetworkModel
    direction: np.ndarray
    methods: dict
    tolerances: dict
    agree_bottlenecks: bool
    agree_throughput: bool

    @property
    def agree(self) -> bool:
        return self.agree_bottlenecks and self.agree_throughput

    def to_text(self) -> str:
        m = self.model
        lines = [f"# {k} = {v}" for k, v in self.tolerances.items()]
        for name, d in self.methods.items():
            bn = " ".join(m.queues[j] for j in d["bottlenecks"])
            lam = " ".join(f"{x:.17g}" for x in d["throughput"])
            extra = f" (c = {d['c']})" if "c" in d else ""
            lines.append(f"{name}{extra}: bottlenecks [{bn}] throughput [{lam}]")
        lines.append(f"bottlenecks agree: {str(self.agree_bottlenecks).lower()}")
        lines.append(f"throughputs agree: {str(self.agree_throughput).lower()}")
        return "\n".join(lines) + "\n"


def _largest_feasible_scale(model, direction, max_points):
    c = 1
    while True:
        nxt = c * 2
        if math.prod(int(math.floor(nxt * d + 0.5)) + 1 for d in direction) > max_points:
            break
        c = nxt
    return c


def compare_methods(
    model: NetworkModel,
    direction,
    *,
    c_exact: int | None = None,
    c_sim: int = 10,
    horizon: float = 2e4,
    seed: int = 0,
    eps_bottleneck: float = pfopt.DEFAULT_EPS_BOTTLENECK,
    util_tol: float = 0.1,
    rel_tol: float = 0.1,
    max_points: int = 200_000,
) -> Comparison:
    """Exact (large c), asymptotic, fluid long-run and simulated (moderate c) results side by side.

    A queue counts as a bottleneck for a finite-population method when its
    utilization is within ``util_tol`` of 1.  Throughputs agree when every
    method is within ``rel_tol`` (relative) of the asymptotic values.  The
    simulation runs at the smaller scale ``c_sim``; its throughput is also
    checked against the exact value at the same population within four
    batch-means half-widths.
    """
    d = model.population_array(direction)
    pf = pfopt.solve_pf(model, d, eps_bottleneck=eps_bottleneck)
    lam_star = pf.allocation
    methods = {"asymptotic": {"bottlenecks": list(pf.bottlenecks), "throughput": lam_star}}

    if c_exact is None:
        c_exact = _largest_feasible_scale(model, d, max_points)
    n_ex = np.floor(c_exact * d + 0.5).astype(np.int64)
    tab = exact.normalizing_table(model, n_ex)
    lam_ex = exact.throughput(tab, n_ex)
    u_ex = model.inv_mu @ lam_ex
    methods["exact"] = {"c": c_exact, "bottlenecks": [j for j in range(model.J) if u_ex[j] >= 1 - util_tol],
                        "throughput": lam_ex}

    T = 200.0 / model.mu_min
    traj = fluid.integrate(model, fluid.uniform_state(model, d), T, step=1e-2 / model.mu_max, record_every=100)
    lam_fl = traj.rates[-1]
    route_rate = np.array([lam_fl[r[0], i] for i, r in enumerate(model.routes)])
    load = (lam_fl * model.inv_mu).sum(axis=1)
    methods["fluid"] = {"bottlenecks": [j for j in range(model.J) if load[j] >= 1 - util_tol],
                        "throughput": route_rate}

    n_sim = np.floor(c_sim * d + 0.5).astype(np.int64)
    est = sim.simulate(model, n_sim, horizon, seed=seed, track_states=False)
    u_sim = (est.pair_throughput * model.inv_mu).sum(axis=1)
    methods["simulation"] = {"c": c_sim, "bottlenecks": [j for j in range(model.J) if u_sim[j] >= 1 - util_tol],
                             "throughput": est.throughput}
    lam_exact_sim = exact.throughput(exact.normalizing_table(model, n_sim), n_sim)

    ref = set(pf.bottlenecks)
    agree_b = all(set(v["bottlenecks"]) == ref for v in methods.values())
    scale = np.maximum(np.abs(lam_star), 1e-300)
    agree_t = all(np.all(np.abs(v["throughput"] - lam_star) <= rel_tol * scale) for v in methods.values())
    agree_t = agree_t and bool(np.all(np.abs(est.throughput - lam_exact_sim) <= 4 * est.throughput_halfwidth))
    tol = {
        "eps_bottleneck": eps_bottleneck,
        "util_tol": util_tol,
        "rel_tol": rel_tol,
        "sim_ci_multiple": 4,
        "confidence": est.confidence,
        "sim_horizon": horizon,
        "seed": seed,
    }
    return Comparison(model, d, methods, tol, agree_b, agree_t)
