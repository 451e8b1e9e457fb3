"""Command-line front end: ``closednet <command> --model PATH ...``.

Exit status is 0 on success, 1 when a computation fails, and 2 for bad
usage or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import exact, fluid, pfopt, sim, sweep
from .model import ModelError, NetworkModel, load_model

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _g(x) -> str:
    return f"{x:.17g}"


# -- argument helpers --------------------------------------------------------


def parse_population(text: str, model: NetworkModel):
    """``a=1,b=2`` (route ids) or a comma list in route order."""
    if text is None:
        return model.population_array()
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        if all("=" in s for s in items):
            out = {}
            for s in items:
                k, v = s.split("=", 1)
                out[k.strip()] = float(v)
            return model.population_array(out)
        return model.population_array([float(s) for s in items])
    except ValueError as exc:
        raise ModelError(f"bad population {text!r}: {exc}", field="population") from None


def parse_pair_values(text: str, model: NetworkModel) -> np.ndarray:
    """Fluid masses from a JSON file or ``q:r=v,...``; unspecified pairs are 0."""
    if text.lstrip().startswith("{") or "=" not in text:
        try:
            with open(text) as fh:
                raw = json.load(fh)
        except OSError:
            raw = json.loads(text)
        items = raw.items()
    else:
        items = [s.split("=", 1) for s in text.split(",") if s.strip()]
    m = np.zeros((model.J, model.I))
    for key, v in items:
        q, _, r = str(key).strip().partition(":")
        j, i = model.queue_index(q), model.route_index(r)
        if j not in model.routes[i]:
            raise ModelError(f"queue {q} is not on route {r}", field="m0")
        m[j, i] = float(v)
    return m


def _initial_state(args, model, n, rng_seed):
    spec = args.m0
    if spec == "uniform":
        return fluid.uniform_state(model, n)
    if spec == "random":
        return fluid.random_state(model, n, np.random.default_rng(rng_seed))
    return parse_pair_values(spec, model)


def _emit(args, text: str):
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _queues_arg(text, model):
    if text is None:
        return None
    return [model.queue_index(q.strip()) for q in text.split(",") if q.strip()]


def _dist_csv(model, dist) -> str:
    lines = [",".join([f"m_{model.pair_label(j, i)}" for j, i in dist.pairs] + ["p"])]
    for s, p in zip(dist.states, dist.probs.tolist()):
        lines.append(",".join([str(x) for x in s] + [_g(p)]))
    return "\n".join(lines) + "\n"


# -- commands ----------------------------------------------------------------


def cmd_exact(args, model):
    n = model.population_array(parse_population(args.population, model), integer=True)
    table = exact.normalizing_table(model, n)
    lam = exact.throughput(table, n)
    util = model.inv_mu @ lam
    eml = exact.mean_queue_lengths(model, n, table)
    queues = _queues_arg(args.marginal, model)
    marg = exact.marginal_distribution(model, n, queues, table=table) if queues else None
    if args.format == "csv":
        lines = ["quantity,queue,route,value", f"logB,,,{_g(table.log_b(n))}"]
        lines += [f"throughput,,{r},{_g(x)}" for r, x in zip(model.route_ids, lam)]
        lines += [f"utilization,{q},,{_g(u)}" for q, u in zip(model.queues, util)]
        lines += [f"mean_length,{model.queues[j]},{model.route_ids[i]},{_g(eml[j, i])}" for j, i in model.pairs]
        text = "\n".join(lines) + "\n"
        if marg is not None:
            text += "\n" + _dist_csv(model, marg)
    else:
        lines = [
            "# population = " + " ".join(f"{r}={int(x)}" for r, x in zip(model.route_ids, n)),
            f"logB: {_g(table.log_b(n))}",
            f"B: {_g(math.exp(table.log_b(n)))}",
            "throughput:",
            *[f"  {r}: {_g(x)}" for r, x in zip(model.route_ids, lam)],
            "utilization:",
            *[f"  {q}: {_g(u)}" for q, u in zip(model.queues, util)],
            "mean_queue_lengths:",
            *[f"  {model.pair_label(j, i)}: {_g(eml[j, i])}" for j, i in model.pairs],
        ]
        if marg is not None:
            lines.append("marginal (" + ",".join(model.pair_label(j, i) for j, i in marg.pairs) + "):")
            lines += [f"  {s}: {_g(p)}" for s, p in zip(marg.states, marg.probs.tolist())]
            lines.append(f"  total: {_g(marg.total())}")
        text = "\n".join(lines) + "\n"
    _emit(args, text)


def cmd_asymptotic(args, model):
    n = parse_population(args.population, model)
    rep = pfopt.solve_pf(model, n, eps_bottleneck=args.eps_bottleneck)
    nb = list(rep.non_bottlenecks)
    means = pfopt.open_means(rep.allocation, model, nb)
    queues = _queues_arg(args.marginal, model)
    if args.format == "csv":
        lines = [f"# eps_bottleneck = {_g(args.eps_bottleneck)}", "quantity,queue,route,value"]
        lines += [f"lambda_star,,{r},{_g(x)}" for r, x in zip(model.route_ids, rep.allocation)]
        lines += [f"utilization,{q},,{_g(u)}" for q, u in zip(model.queues, rep.utilizations)]
        lines += [f"bottleneck,{model.queues[j]},,{int(j in rep.bottlenecks)}" for j in range(model.J)]
        lines += [f"open_mean,{model.queues[j]},{model.route_ids[i]},{_g(means[j, i])}"
                  for j in nb for i in model.routes_at(j)]
        lines.append(f"beta_star,,,{_g(rep.beta_star)}")
        text = "\n".join(lines) + "\n"
    else:
        text = rep.to_text()
        text += "open_means:\n" + "".join(
            f"  {model.pair_label(j, i)}: {_g(means[j, i])}\n" for j in nb for i in model.routes_at(j)
        )
    for j in queues or []:
        if j in rep.bottlenecks:
            raise UsageError(f"queue {model.queues[j]} is a bottleneck; it has no open-network marginal")
        dist = pfopt.open_marginal(rep.allocation, model, j, tail=args.tail)
        if args.format == "csv":
            text += "\n" + _dist_csv(model, dist)
        else:
            text += f"open_marginal {model.queues[j]} (truncated mass {dist.truncated_mass:.3e}):\n"
            text += "".join(f"  {s}: {_g(p)}\n" for s, p in zip(dist.states, dist.probs.tolist()))
    _emit(args, text)


def cmd_sweep(args, model):
    if args.scales is None:
        raise UsageError("sweep needs --scales")
    spec = sweep.SweepSpec.build(model, parse_population(args.population, model), sweep.parse_scales(args.scales))
    budget = None if args.memory_budget is None else int(args.memory_budget * 2**20)
    res = sweep.run_sweep(
        spec,
        eps_bottleneck=args.eps_bottleneck,
        memory_budget=budget if budget is not None else exact.DEFAULT_MEMORY_BUDGET,
        workers=args.workers,
    )
    _emit(args, res.to_csv())


def cmd_fluid(args, model):
    n = parse_population(args.population, model)
    m0 = _initial_state(args, model, n, args.seed)
    n = m0.sum(axis=0)
    horizon = args.horizon if args.horizon is not None else 200.0 / model.mu_min
    traj = fluid.integrate(model, m0, horizon, args.step, record_every=args.record_every)
    rep = pfopt.solve_pf(model, n, eps_bottleneck=args.eps_bottleneck)
    verdict = fluid.optimal_set_membership(model, n, rep, traj.final(), tol=args.tol)
    header = f"# horizon = {_g(horizon)}\n# step = {_g(traj.step)}\n# beta_star = {_g(rep.beta_star)}\n"
    csv = header + traj.to_csv(rep.beta_star)
    if args.out:
        _emit(args, csv)
        sys.stdout.write(verdict.to_text())
    else:
        sys.stdout.write(csv)
        sys.stderr.write(verdict.to_text())


def cmd_simulate(args, model):
    n = parse_population(args.population, model)
    horizon = args.horizon if args.horizon is not None else 1e4
    queues = _queues_arg(args.marginal, model)
    est = sim.simulate(model, n, horizon, args.warmup, args.seed, batches=args.batches,
                       track_states=queues is not None)
    text = est.to_csv() if args.format == "csv" else est.to_text()
    if queues:
        dist = est.marginal(queues)
        if args.format == "csv":
            text += "\n" + _dist_csv(model, dist)
        else:
            text += "marginal:\n" + "".join(f"  {s}: {_g(p)}\n" for s, p in zip(dist.states, dist.probs.tolist()))
    _emit(args, text)


def cmd_scaled(args, model):
    n = parse_population(args.population, model)
    m0 = _initial_state(args, model, n, args.seed)
    horizon = args.horizon if args.horizon is not None else 10.0
    path = sim.fluid_scaled_trajectory(model, m0.sum(axis=0), args.scale, horizon, args.seed, m0=m0,
                                       samples=args.samples)
    rep = pfopt.solve_pf(model, m0.sum(axis=0), eps_bottleneck=args.eps_bottleneck)
    header = f"# c = {_g(args.scale)}\n# seed = {args.seed}\n# beta_star = {_g(rep.beta_star)}\n"
    _emit(args, header + path.to_csv(rep.beta_star))


def cmd_compare(args, model):
    n = parse_population(args.population, model)
    cmp = sweep.compare_methods(
        model, n, c_exact=args.c_exact, c_sim=args.c_sim,
        horizon=args.horizon if args.horizon is not None else 2e4,
        seed=args.seed, eps_bottleneck=args.eps_bottleneck,
    )
    _emit(args, cmp.to_text())
    if not cmp.agree:
        raise RuntimeError("methods disagree; see report")


COMMANDS = {
    "exact": cmd_exact,
    "asymptotic": cmd_asymptotic,
    "sweep": cmd_sweep,
    "fluid": cmd_fluid,
    "simulate": cmd_simulate,
    "scaled": cmd_scaled,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="closednet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model JSON file or builtin:c1|t1|six")
    common.add_argument("--population", help="route populations, e.g. a=2,b=3 (default: the model's)")
    common.add_argument("--out", help="write the main output here instead of stdout")
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--eps-bottleneck", type=float, default=pfopt.DEFAULT_EPS_BOTTLENECK)
    common.add_argument("--horizon", type=float)

    s = sub.add_parser("exact", parents=[common], help="normalizing constant, throughput, means")
    s.add_argument("--marginal", help="comma list of queues for a joint marginal")

    s = sub.add_parser("asymptotic", parents=[common], help="proportionally fair limit and bottlenecks")
    s.add_argument("--marginal", help="non-bottleneck queues whose open marginal to print")
    s.add_argument("--tail", type=float, default=1e-9, help="truncation mass for open marginals")

    s = sub.add_parser("sweep", parents=[common], help="exact quantities along c * n (CSV)")
    s.add_argument("--scales", help="a:b, a:b:step or a comma list")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--memory-budget", type=float, help="MiB per lattice table (default 2048)")

    s = sub.add_parser("fluid", parents=[common], help="integrate the fluid model (CSV)")
    s.add_argument("--m0", default="uniform", help="uniform, random, q:r=v,... or a JSON file")
    s.add_argument("--step", type=float)
    s.add_argument("--record-every", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-2, help="membership tolerance")

    s = sub.add_parser("simulate", parents=[common], help="stationary simulation estimates")
    s.add_argument("--warmup", type=float)
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--marginal", help="comma list of queues for an empirical marginal")

    s = sub.add_parser("scaled", parents=[common], help="simulated path rescaled by c (CSV)")
    s.add_argument("--scale", type=float, default=100.0)
    s.add_argument("--m0", default="uniform", help="uniform, random, q:r=v,... or a JSON file")
    s.add_argument("--samples", type=int, default=201)

    s = sub.add_parser("compare", parents=[common], help="exact, asymptotic, fluid and simulation side by side")
    s.add_argument("--c-exact", type=int)
    s.add_argument("--c-sim", type=int, default=10)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        model = load_model(args.model)
        COMMANDS[args.command](args, model)
    except (ModelError, UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        pfopt.ConvergenceError,
        fluid.FluidError,
        exact.MemoryBudgetError,
        exact.StateSpaceError,
        ArithmeticError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
