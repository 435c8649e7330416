"""Express-lane networks: latency functions, validation and DAG routing.

Every edge carries two lanes, an express (tolled) lane with index
``EXPRESS = 0`` and a general purpose lane with index ``GENERAL = 1``.
"""

from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ._validation import check_nonnegative, check_positive
from .exceptions import (
    CycleDetected,
    MultipleOrigins,
    NegativeFlow,
    NetworkValidationError,
    NonIncreasingLatency,
    NoPath,
    UnreachableEdge,
)

EXPRESS = 0
GENERAL = 1
LANES = ("express", "general")

_FORMS = ("monomial", "bpr", "polynomial")


class NoPathError(NetworkValidationError):
    pass


@dataclass(frozen=True)
class LatencyFn:
    """Strictly increasing, strictly convex lane delay.

    ``monomial``: ``b * x**p``; ``bpr``: ``a + b * (x / c)**p``;
    ``polynomial``: ``sum(coefficients[i] * x**i)``.
    """

    form: str
    a: float = 0.0
    b: float = 1.0
    c: float = 1.0
    p: float = 2.0
    coefficients: tuple = ()

    def __post_init__(self):
        if self.form not in _FORMS:
            raise ValueError(f"unknown latency form {self.form!r}; expected one of {_FORMS}")
        if self.form == "polynomial":
            # shape (increasing, convex) is checked when a network is validated
            coefs = tuple(check_nonnegative(float(v), "polynomial coefficient") for v in self.coefficients)
            if not coefs:
                raise ValueError("polynomial latency needs at least one coefficient")
            object.__setattr__(self, "coefficients", coefs)
            return
        check_nonnegative(self.a, "a")
        check_positive(self.b, "b")
        check_positive(self.c, "c")
        if check_positive(self.p, "p") < 2:
            raise ValueError(f"exponent p must be >= 2, got {self.p}")
        if self.form == "monomial" and self.a != 0.0:
            raise ValueError("monomial latency has no free-flow term; use form='bpr'")

    @classmethod
    def monomial(cls, b, p):
        return cls("monomial", b=float(b), p=float(p))

    @classmethod
    def bpr(cls, a, b, c, p=4.0):
        return cls("bpr", a=float(a), b=float(b), c=float(c), p=float(p))

    @classmethod
    def polynomial(cls, coefficients):
        return cls("polynomial", coefficients=tuple(float(v) for v in coefficients))

    @classmethod
    def from_spec(cls, spec):
        spec = dict(spec)
        form = spec.pop("form", None)
        if form == "monomial":
            return cls.monomial(spec["b"], spec["p"])
        if form == "bpr":
            return cls.bpr(spec["a"], spec["b"], spec["c"], spec.get("p", 4.0))
        if form == "polynomial":
            return cls.polynomial(spec["coefficients"])
        raise ValueError(f"unknown latency form {form!r}")

    def to_spec(self):
        if self.form == "monomial":
            return {"form": "monomial", "b": self.b, "p": self.p}
        if self.form == "bpr":
            return {"form": "bpr", "a": self.a, "b": self.b, "c": self.c, "p": self.p}
        return {"form": "polynomial", "coefficients": list(self.coefficients)}

    @property
    def terms(self):
        """``(coefficient, power)`` pairs of the power-sum representation."""
        if self.form == "monomial":
            return ((self.b, self.p),)
        if self.form == "bpr":
            return ((self.a, 0.0), (self.b / self.c**self.p, self.p))
        return tuple((v, float(i)) for i, v in enumerate(self.coefficients) if v != 0.0)

    @property
    def third_deriv_positive(self):
        return any(coef > 0 and power > 2 for coef, power in self.terms)

    def _check(self, x):
        x = float(x)
        if x < 0:
            raise NegativeFlow(f"latency evaluated at negative flow {x}")
        return x

    def __call__(self, x):
        return latency_eval(self, x)

    def derivative(self, x, order=1):
        x = self._check(x)
        total = 0.0
        for coef, power in self.terms:
            factor = 1.0
            for k in range(order):
                factor *= power - k
            if factor == 0.0:
                continue
            total += coef * factor * x ** (power - order)
        return total


def latency_eval(fn: LatencyFn, x: float) -> float:
    x = fn._check(x)
    return float(sum(coef * x**power for coef, power in fn.terms))


def latency_prime(fn: LatencyFn, x: float) -> float:
    return fn.derivative(x, 1)


def latency_integral(fn: LatencyFn, x: float) -> float:
    """Antiderivative of the latency from 0 to ``x``."""
    x = fn._check(x)
    return float(sum(coef * x ** (power + 1) / (power + 1) for coef, power in fn.terms))


class LatencyTable:
    """Vectorised evaluation of every lane latency of a network.

    Arrays passed in have trailing shape ``(n_edges, 2)``.
    """

    def __init__(self, fns):
        fns = list(fns)
        width = max(len(fn.terms) for fn in fns)
        self.coefs = np.zeros((len(fns), width))
        self.powers = np.zeros((len(fns), width))
        for i, fn in enumerate(fns):
            for j, (coef, power) in enumerate(fn.terms):
                self.coefs[i, j] = coef
                self.powers[i, j] = power
        self.dcoefs = self.coefs * self.powers
        self.dpowers = np.maximum(self.powers - 1.0, 0.0)
        self.icoefs = self.coefs / (self.powers + 1.0)
        self.ipowers = self.powers + 1.0

    def _apply(self, x, coefs, powers):
        shape = x.shape
        flat = np.maximum(x.reshape(shape[:-2] + (-1,)), 0.0)
        out = np.sum(coefs * flat[..., None] ** powers, axis=-1)
        return out.reshape(shape)

    def latency(self, x):
        return self._apply(np.asarray(x, dtype=float), self.coefs, self.powers)

    def prime(self, x):
        return self._apply(np.asarray(x, dtype=float), self.dcoefs, self.dpowers)

    def integral(self, x):
        return self._apply(np.asarray(x, dtype=float), self.icoefs, self.ipowers)


@dataclass(frozen=True)
class Edge:
    id: str
    tail: str
    head: str
    express: LatencyFn
    general: LatencyFn

    def lane(self, k):
        return self.express if k == EXPRESS else self.general


@dataclass(frozen=True)
class Network:
    nodes: tuple
    edges: tuple
    origin: object
    destination: object

    @classmethod
    def from_dict(cls, data):
        edges = []
        for i, e in enumerate(data["edges"]):
            edges.append(
                Edge(
                    id=str(e.get("id", i)),
                    tail=str(e["tail"]),
                    head=str(e["head"]),
                    express=LatencyFn.from_spec(e["express"]),
                    general=LatencyFn.from_spec(e["general"]),
                )
            )
        nodes = tuple(str(n) for n in data["nodes"])
        origin = data["origin"]
        origin = [str(v) for v in origin] if isinstance(origin, list) else str(origin)
        return cls(nodes, tuple(edges), origin, str(data["destination"]))

    def to_dict(self):
        return {
            "nodes": list(self.nodes),
            "edges": [
                {"id": e.id, "tail": e.tail, "head": e.head,
                 "express": e.express.to_spec(), "general": e.general.to_spec()}
                for e in self.edges
            ],
            "origin": self.origin,
            "destination": self.destination,
        }

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_index(self, edge_id):
        for i, e in enumerate(self.edges):
            if e.id == edge_id:
                return i
        raise KeyError(edge_id)


def single_edge_network(express, general=None):
    """Two-node network ``o -> d`` with one edge; lanes share ``express`` by default."""
    general = express if general is None else general
    return Network(("o", "d"), (Edge("e", "o", "d", express, general),), "o", "d")


def load_network(path):
    with open(Path(path)) as fh:
        return Network.from_dict(json.load(fh))


@dataclass(frozen=True)
class ValidatedNetwork:
    """A network that passed :func:`validate`, plus routing indexes."""

    network: Network
    order: tuple
    out_edges: dict = field(repr=False)
    on_path: tuple = field(repr=False)
    latencies: LatencyTable = field(repr=False, compare=False)

    @property
    def edges(self):
        return self.network.edges

    @property
    def n_edges(self):
        return self.network.n_edges

    @property
    def origin(self):
        return self.network.origin

    @property
    def destination(self):
        return self.network.destination

    def lane_fn(self, e, k):
        return self.network.edges[e].lane(k)


def _reachable(start, adjacency):
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def find_violations(network: Network, total_demand: float = 1.0) -> list:
    """Every structural problem of ``network``, as exception instances."""
    problems = []
    if isinstance(network.origin, (list, tuple)):
        if len(network.origin) != 1:
            problems.append(MultipleOrigins(f"expected one origin, got {list(network.origin)}"))
            return problems
        network = Network(network.nodes, network.edges, network.origin[0], network.destination)
    nodes = set(network.nodes)
    for name, node in (("origin", network.origin), ("destination", network.destination)):
        if node not in nodes:
            problems.append(NetworkValidationError(f"{name} {node!r} is not a node"))
    if network.origin == network.destination:
        problems.append(NetworkValidationError("origin and destination coincide"))
    if not network.edges:
        problems.append(NetworkValidationError("network has no edges"))
    ids = [e.id for e in network.edges]
    if len(set(ids)) != len(ids):
        problems.append(NetworkValidationError("edge ids are not unique"))
    for e in network.edges:
        for end in (e.tail, e.head):
            if end not in nodes:
                problems.append(NetworkValidationError(f"edge {e.id} references unknown node {end!r}"))
    if problems:
        return problems

    sorter = graphlib.TopologicalSorter({n: set() for n in network.nodes})
    for e in network.edges:
        sorter.add(e.head, e.tail)
    try:
        tuple(sorter.static_order())
    except graphlib.CycleError as err:
        problems.append(CycleDetected(f"network contains a cycle through {err.args[1]}"))
        return problems

    forward, backward = {}, {}
    for e in network.edges:
        forward.setdefault(e.tail, []).append(e.head)
        backward.setdefault(e.head, []).append(e.tail)
    from_origin = _reachable(network.origin, forward)
    to_dest = _reachable(network.destination, backward)
    if network.destination not in from_origin:
        problems.append(NoPathError(f"destination {network.destination!r} unreachable from origin"))
    for e in network.edges:
        if e.tail not in from_origin or e.head not in to_dest:
            problems.append(UnreachableEdge(f"edge {e.id} ({e.tail}->{e.head}) lies on no origin-destination path"))

    grid = np.linspace(0.0, max(float(total_demand), 1e-12), 11)[1:]
    for e in network.edges:
        for k, fn in ((EXPRESS, e.express), (GENERAL, e.general)):
            for x in grid:
                if not (fn.derivative(x, 1) > 0 and fn.derivative(x, 2) > 0):
                    problems.append(NonIncreasingLatency(
                        f"{LANES[k]} lane of edge {e.id} is not strictly increasing and convex at x={x:g}"))
                    break
    return problems


def validate(network: Network, total_demand: float = 1.0) -> ValidatedNetwork:
    """Check acyclicity, single origin, path coverage and latency monotonicity.

    Raises the first violation found; its ``violations`` attribute lists all of them.
    """
    if isinstance(network, ValidatedNetwork):
        return network
    problems = find_violations(network, total_demand)
    if problems:
        first = problems[0]
        first.violations = problems
        raise first
    if isinstance(network.origin, (list, tuple)):
        network = Network(network.nodes, network.edges, network.origin[0], network.destination)

    sorter = graphlib.TopologicalSorter({n: set() for n in network.nodes})
    for e in network.edges:
        sorter.add(e.head, e.tail)
    order = tuple(sorter.static_order())
    out_edges = {n: [] for n in network.nodes}
    for i, e in enumerate(network.edges):
        out_edges[e.tail].append(i)
    lanes = [fn for e in network.edges for fn in (e.express, e.general)]
    return ValidatedNetwork(
        network=network,
        order=order,
        out_edges={n: tuple(v) for n, v in out_edges.items()},
        on_path=tuple(True for _ in network.edges),
        latencies=LatencyTable(lanes),
    )


class Route(NamedTuple):
    steps: tuple  # ((edge_index, lane_index), ...)
    cost: float

    def describe(self, network):
        net = network.network if isinstance(network, ValidatedNetwork) else network
        return [(net.edges[e].id, LANES[k]) for e, k in self.steps]


def cheapest_route(network, costs) -> Route:
    """Minimum-cost origin-destination route over edge-lane choices.

    ``costs`` has shape ``(n_edges, 2)``. Ties go to the lexicographically
    smallest ``(edge index, lane index)`` sequence, so express wins a tie
    against general on the same edge.
    """
    net = validate(network)
    costs = np.asarray(costs, dtype=float)
    if costs.shape != (net.n_edges, 2):
        raise ValueError(f"costs must have shape ({net.n_edges}, 2), got {costs.shape}")
    return _cheapest_route(net, costs)


def _cheapest_route(net: ValidatedNetwork, costs) -> Route:
    best = {net.origin: (0.0, ())}
    edges = net.network.edges
    for node in net.order:
        if node not in best:
            continue
        base, path = best[node]
        for e in net.out_edges[node]:
            head = edges[e].head
            for k in (EXPRESS, GENERAL):
                cand = base + costs[e, k]
                step = path + ((e, k),)
                cur = best.get(head)
                if cur is None or cand < cur[0] or (cand == cur[0] and step < cur[1]):
                    best[head] = (cand, step)
    if net.destination not in best:
        raise NoPath("no route from origin to destination")
    cost, steps = best[net.destination]
    return Route(steps, float(cost))


def enumerate_routes(network) -> Iterator[tuple]:
    """Yield every origin-destination route as a tuple of ``(edge, lane)`` steps (DFS)."""
    net = validate(network)
    edges = net.network.edges

    def walk(node, prefix):
        if node == net.destination:
            yield prefix
            return
        for e in net.out_edges[node]:
            for k in (EXPRESS, GENERAL):
                yield from walk(edges[e].head, prefix + ((e, k),))

    yield from walk(net.origin, ())


def route_cost(route: Sequence, costs) -> float:
    return float(sum(costs[e][k] for e, k in route))
