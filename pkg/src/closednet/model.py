"""Network topology for closed multi-class processor-sharing networks.

A network is a set of queues and a list of routes.  Each route is a cyclic,
duplicate-free sequence of queues; a customer leaving the last queue of a
route rejoins its first queue.  Service rates are attached to (queue, route)
pairs.  Queue and route identifiers are strings at the file level and dense
integer indices everywhere else.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "NetworkModel",
    "validate",
    "parse_model",
    "serialize_model",
    "canonicalize",
    "load_model",
    "bundled_model",
    "BUNDLED_MODELS",
    "reduced_model",
    "replicate_queue",
]


class ModelError(ValueError):
    """Invalid model file or model definition.

    ``line`` and ``field`` locate the problem when known.
    """

    def __init__(self, message, *, line=None, field=None, violations=()):
        self.line = line
        self.field = field
        self.violations = list(violations)
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Closed network topology.

    Parameters
    ----------
    queues : sequence of str
        Queue identifiers, in model order (the convolution order).
    routes : mapping of str to sequence of str
        Route identifier to the ordered queues it visits.
    rates : mapping of (queue id, route id) to positive number
        Service rate of route-``i`` customers at queue ``j``.
    population : mapping of str to number, optional
        Default population carried by a model file.

    Construction does not validate; call :func:`validate` or use
    :meth:`build`, which raises :class:`ModelError` on violations.
    """

    queues: tuple
    route_ids: tuple
    routes: tuple  # tuple of tuples of queue indices
    rates: Mapping  # (j, i) -> number as given (int, float or Fraction)
    population: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, queues, routes, rates, population=None, *, check=True):
        queues = tuple(str(q) for q in queues)
        route_ids = tuple(str(r) for r in routes)
        qindex = {q: k for k, q in enumerate(queues)}
        violations = []
        idx_routes = []
        for r in route_ids:
            seq = []
            for q in routes[r]:
                q = str(q)
                if q not in qindex:
                    violations.append(f"route {r!r}: unknown queue {q!r}")
                    continue
                seq.append(qindex[q])
            idx_routes.append(tuple(seq))
        rindex = {r: k for k, r in enumerate(route_ids)}
        idx_rates = {}
        for key, value in rates.items():
            q, r = key if isinstance(key, tuple) else _split_rate_key(key)
            if q not in qindex or r not in rindex:
                violations.append(f"rate {q}:{r}: unknown queue or route")
                continue
            idx_rates[(qindex[q], rindex[r])] = value
        pop = None
        if population is not None:
            missing = [r for r in population if r not in rindex]
            if missing:
                violations.append(f"population: unknown routes {missing}")
            pop = tuple(population.get(r, 0) for r in route_ids)
        if violations and check:
            raise ModelError("invalid model: " + "; ".join(violations), violations=violations)
        model = cls(queues, route_ids, tuple(idx_routes), idx_rates, pop)
        if check:
            problems = validate(model)
            if problems:
                raise ModelError("invalid model: " + "; ".join(problems), violations=problems)
        return model

    # -- sizes and lookups -------------------------------------------------

    @property
    def J(self) -> int:
        return len(self.queues)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.routes)

    def queue_index(self, q) -> int:
        if isinstance(q, (int, np.integer)):
            return int(q)
        try:
            return self.queues.index(str(q))
        except ValueError:
            raise ModelError(f"unknown queue {q!r}") from None

    def route_index(self, r) -> int:
        if isinstance(r, (int, np.integer)):
            return int(r)
        try:
            return self.route_ids.index(str(r))
        except ValueError:
            raise ModelError(f"unknown route {r!r}") from None

    def queue_set(self, subset) -> tuple:
        return tuple(sorted({self.queue_index(q) for q in subset}))

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def pairs(self) -> tuple:
        """(j, i) pairs with j on route i, queue-major order."""
        return self._cached(
            "pairs",
            lambda: tuple((j, i) for j in range(self.J) for i in range(self.I) if j in self.routes[i]),
        )

    @property
    def incidence(self) -> np.ndarray:
        """Boolean J x I matrix, True where queue j is on route i."""

        def make():
            a = np.zeros((self.J, self.I), dtype=bool)
            for j, i in self.pairs:
                a[j, i] = True
            a.setflags(write=False)
            return a

        return self._cached("incidence", make)

    @property
    def mu(self) -> np.ndarray:
        """J x I float rates; 0 where the queue is not on the route."""

        def make():
            a = np.zeros((self.J, self.I))
            for (j, i), v in self.rates.items():
                a[j, i] = float(v)
            a.setflags(write=False)
            return a

        return self._cached("mu", make)

    @property
    def inv_mu(self) -> np.ndarray:
        """J x I mean service times 1/mu; 0 off-route."""

        def make():
            a = np.zeros((self.J, self.I))
            a[self.incidence] = 1.0 / self.mu[self.incidence]
            a.setflags(write=False)
            return a

        return self._cached("inv_mu", make)

    @property
    def mu_max(self) -> float:
        return float(self.mu[self.incidence].max())

    @property
    def mu_min(self) -> float:
        return float(self.mu[self.incidence].min())

    def routes_at(self, j) -> tuple:
        """Routes visiting queue j, in route order."""
        return tuple(i for i in range(self.I) if j in self.routes[i])

    def prev_queue(self, j, i) -> int:
        """Queue before j on route i (cyclic)."""
        r = self.routes[i]
        return r[r.index(j) - 1]

    def next_queue(self, j, i) -> int:
        """Queue after j on route i (cyclic)."""
        r = self.routes[i]
        return r[(r.index(j) + 1) % len(r)]

    @property
    def prev_matrix(self) -> np.ndarray:
        """J x I int array of previous queues; -1 off-route."""

        def make():
            a = np.full((self.J, self.I), -1, dtype=int)
            for j, i in self.pairs:
                a[j, i] = self.prev_queue(j, i)
            a.setflags(write=False)
            return a

        return self._cached("prev", make)

    @property
    def next_matrix(self) -> np.ndarray:
        def make():
            a = np.full((self.J, self.I), -1, dtype=int)
            for j, i in self.pairs:
                a[j, i] = self.next_queue(j, i)
            a.setflags(write=False)
            return a

        return self._cached("next", make)

    def rate(self, j, i):
        return self.rates[(j, i)]

    def population_array(self, n=None, *, integer=False) -> np.ndarray:
        """Coerce a population to an array aligned with the routes.

        Accepts a mapping route-id -> count, a sequence in route order, or
        ``None`` for the model's default population.
        """
        if n is None:
            if self.population is None:
                raise ModelError("no population given and model has no default")
            n = self.population
        if isinstance(n, Mapping):
            arr = np.zeros(self.I)
            for r, v in n.items():
                arr[self.route_index(r)] = v
        else:
            arr = np.asarray(n, dtype=float).reshape(-1)
            if arr.size != self.I:
                raise ModelError(f"population has {arr.size} entries, model has {self.I} routes")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ModelError("population entries must be finite and nonnegative")
        if integer:
            if np.any(arr != np.round(arr)):
                raise ModelError("population must be integer here")
            return arr.astype(np.int64)
        return arr

    def pair_array(self, values) -> np.ndarray:
        """Coerce per-pair values (mapping (j,i) or J x I array) to a J x I array."""
        if isinstance(values, Mapping):
            arr = np.zeros((self.J, self.I))
            for (q, r), v in values.items():
                arr[self.queue_index(q), self.route_index(r)] = v
            return arr
        arr = np.array(values, dtype=float)
        if arr.shape == (len(self.pairs),):
            out = np.zeros((self.J, self.I))
            for (j, i), v in zip(self.pairs, arr):
                out[j, i] = v
            return out
        if arr.shape != (self.J, self.I):
            raise ModelError(f"expected shape {(self.J, self.I)} or ({len(self.pairs)},), got {arr.shape}")
        return arr

    def pair_label(self, j, i) -> str:
        return f"{self.queues[j]}:{self.route_ids[i]}"

    def __repr__(self):
        routes = {r: [self.queues[j] for j in seq] for r, seq in zip(self.route_ids, self.routes)}
        return f"NetworkModel(queues={list(self.queues)}, routes={routes})"


def _split_rate_key(key):
    q, sep, r = str(key).rpartition(":")
    if not sep:
        raise ModelError(f"rate key {key!r} is not of the form 'queue:route'", field="rates")
    return q, r


def validate(model: NetworkModel) -> list[str]:
    """Return a list of invariant violations; empty when the model is valid."""
    problems = []
    J = len(model.queues)
    if J == 0:
        problems.append("no queues")
    if len(set(model.queues)) != J:
        problems.append("duplicate queue identifier")
    if len(set(model.route_ids)) != len(model.route_ids):
        problems.append("duplicate route identifier")
    if not model.routes:
        problems.append("no routes")
    used = set()
    for rid, seq in zip(model.route_ids, model.routes):
        if len(seq) == 0:
            problems.append(f"route {rid!r} is empty")
        if len(set(seq)) != len(seq):
            problems.append(f"route {rid!r}: duplicate queue on route")
        for j in seq:
            if not 0 <= j < J:
                problems.append(f"route {rid!r}: unknown queue index {j}")
        used.update(seq)
    for j in range(J):
        if j not in used:
            problems.append(f"queue {model.queues[j]!r} is on no route")
    for i, seq in enumerate(model.routes):
        for j in seq:
            if (j, i) not in model.rates:
                problems.append(f"missing rate for {model.queues[j]}:{model.route_ids[i]}")
    for (j, i), v in model.rates.items():
        label = f"{j}:{i}"
        if 0 <= j < J and 0 <= i < len(model.routes):
            label = f"{model.queues[j]}:{model.route_ids[i]}"
            if j not in model.routes[i]:
                problems.append(f"rate {label} given for a queue not on the route")
        try:
            ok = math.isfinite(float(v)) and float(v) > 0
        except (TypeError, ValueError):
            ok = False
        if not ok:
            problems.append(f"rate {label}: nonpositive rate {v!r}")
    if model.population is not None:
        for rid, v in zip(model.route_ids, model.population):
            if not isinstance(v, (int, float, Fraction)) or v < 0:
                problems.append(f"population {rid!r}: must be a nonnegative number")
    return problems


# -- file format -------------------------------------------------------------


def parse_model(text) -> NetworkModel:
    """Parse a JSON model document.

    Top-level keys: ``queues`` (list of ids), ``routes`` (route id -> list of
    queue ids), ``rates`` ("queue:route" -> positive number) and optional
    ``population`` (route id -> number).
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"syntax error: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise ModelError("top level must be an object")
    unknown = set(doc) - {"queues", "routes", "rates", "population"}
    if unknown:
        raise ModelError(f"unknown keys {sorted(unknown)}", field=sorted(unknown)[0])
    for key, kind in (("queues", list), ("routes", dict), ("rates", dict)):
        if key not in doc:
            raise ModelError("missing key", field=key)
        if not isinstance(doc[key], kind):
            raise ModelError(f"must be a {kind.__name__}", field=key)
    for key, value in doc["rates"].items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ModelError("rate must be a number", field=f"rates.{key}")
    for rid, seq in doc["routes"].items():
        if not isinstance(seq, list):
            raise ModelError("route must be a list of queue ids", field=f"routes.{rid}")
    pop = doc.get("population")
    if pop is not None:
        if not isinstance(pop, dict):
            raise ModelError("must be an object", field="population")
        for key, value in pop.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ModelError("population must be a number", field=f"population.{key}")
    rates = {_split_rate_key(k): v for k, v in doc["rates"].items()}
    return NetworkModel.build(doc["queues"], doc["routes"], rates, pop)


def _as_document(model: NetworkModel) -> dict:
    doc = {
        "queues": list(model.queues),
        "routes": {r: [model.queues[j] for j in seq] for r, seq in zip(model.route_ids, model.routes)},
        "rates": {model.pair_label(j, i): _plain_number(model.rates[(j, i)]) for j, i in model.pairs},
    }
    if model.population is not None:
        doc["population"] = {r: _plain_number(v) for r, v in zip(model.route_ids, model.population)}
    return doc


def _plain_number(v):
    if isinstance(v, Fraction):
        return v.numerator if v.denominator == 1 else float(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def serialize_model(model: NetworkModel) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(_as_document(model), sort_keys=True, indent=2) + "\n"


def canonicalize(text) -> str:
    """Canonical form of a model document, without semantic checks."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


def load_model(path) -> NetworkModel:
    """Read a model file, or a bundled model given as ``builtin:NAME``."""
    path = str(path)
    if path.startswith("builtin:"):
        return bundled_model(path.split(":", 1)[1])
    with open(path, "rb") as fh:
        return parse_model(fh.read())


BUNDLED_MODELS = ("c1", "t1", "six")


def bundled_model(name: str) -> NetworkModel:
    """One of the example networks shipped with the package.

    ``c1``: two queues in a cycle, rates (1, 2).
    ``t1``: two routes sharing queue 3.
    ``six``: six queues, three routes, two bottlenecks.
    """
    if name not in BUNDLED_MODELS:
        raise ModelError(f"no bundled model {name!r}; choose from {BUNDLED_MODELS}")
    text = resources.files("closednet").joinpath("data", f"{name}.json").read_bytes()
    return parse_model(text)


# -- derived networks --------------------------------------------------------


def reduced_model(model: NetworkModel, keep) -> NetworkModel:
    """The network with every queue outside ``keep`` removed.

    Routes keep the relative order of their remaining queues.  Raises
    :class:`ModelError` when a route would lose all its queues.
    """
    keep = set(model.queue_set(keep))
    if not keep:
        raise ModelError("keep must be nonempty")
    for rid, seq in zip(model.route_ids, model.routes):
        if not keep.intersection(seq):
            raise ModelError(f"route {rid!r} has no queue in the kept set")
    queues = [q for j, q in enumerate(model.queues) if j in keep]
    routes = {
        rid: [model.queues[j] for j in seq if j in keep] for rid, seq in zip(model.route_ids, model.routes)
    }
    rates = {
        (model.queues[j], model.route_ids[i]): v for (j, i), v in model.rates.items() if j in keep
    }
    pop = None if model.population is None else dict(zip(model.route_ids, model.population))
    return NetworkModel.build(queues, routes, rates, pop)


def replicate_queue(model: NetworkModel, j, name=None) -> NetworkModel:
    """Insert a copy of queue ``j`` immediately after it on every route through it.

    The copy gets the same per-route rates.  It is appended to the queue list,
    so a second replica of the same queue also lands directly after ``j``
    on each route, ahead of the first replica.
    """
    j = model.queue_index(j)
    if not 0 <= j < model.J:
        raise ModelError(f"unknown queue {j}")
    base = model.queues[j]
    if name is None:
        name = base + "'"
        while name in model.queues:
            name += "'"
    if name in model.queues:
        raise ModelError(f"queue id {name!r} already in use")
    queues = list(model.queues) + [name]
    routes = {}
    for rid, seq in zip(model.route_ids, model.routes):
        labels = []
        for k in seq:
            labels.append(model.queues[k])
            if k == j:
                labels.append(name)
        routes[rid] = labels
    rates = {(model.queues[a], model.route_ids[b]): v for (a, b), v in model.rates.items()}
    for i in model.routes_at(j):
        rates[(name, model.route_ids[i])] = model.rates[(j, i)]
    pop = None if model.population is None else dict(zip(model.route_ids, model.population))
    return NetworkModel.build(queues, routes, rates, pop)
