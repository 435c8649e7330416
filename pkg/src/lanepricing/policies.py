"""User groups, DBCP/CBCP policies, flow patterns and per-user lane costs.

Policy arrays are indexed ``(edge, time)``. Flow arrays are indexed
``(group, time, edge)``. All costs returned here are in money units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import (
    check_edge_time_array,
    check_nonnegative,
    check_vot_series,
)
from .exceptions import InvalidHorizon
from .network import EXPRESS, GENERAL, validate


@dataclass(frozen=True, eq=False)
class UserGroup:
    id: str
    eligible: bool
    vot: np.ndarray
    demand: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "vot", check_vot_series(self.vot, name=f"vot of group {self.id}"))
        object.__setattr__(self, "demand", check_nonnegative(self.demand, f"demand of group {self.id}"))
        object.__setattr__(self, "eligible", bool(self.eligible))

    @property
    def horizon(self):
        return self.vot.shape[0]

    @property
    def time_invariant(self):
        return bool(np.all(self.vot == self.vot[0]))

    def with_horizon(self, horizon):
        if self.horizon == horizon:
            return self
        if self.horizon != 1:
            raise InvalidHorizon(f"group {self.id} has a VoT series of length {self.horizon}, expected {horizon}")
        return UserGroup(self.id, self.eligible, np.full(horizon, self.vot[0]), self.demand)

    def to_dict(self):
        return {"id": self.id, "eligible": self.eligible, "demand": self.demand, "vot": self.vot.tolist()}


@dataclass(frozen=True, eq=False)
class DbcpPolicy:
    """Tolls and eligible-user discount fractions, both shaped ``(n_edges, horizon)``."""

    tolls: np.ndarray
    discounts: np.ndarray

    def __post_init__(self):
        tolls = check_edge_time_array(self.tolls, "tolls")
        discounts = np.asarray(self.discounts, dtype=float)
        if discounts.ndim == 0:
            discounts = np.full(tolls.shape, float(discounts))
        discounts = check_edge_time_array(discounts, "discounts", *tolls.shape, lo=0.0, hi=1.0)
        object.__setattr__(self, "tolls", tolls)
        object.__setattr__(self, "discounts", discounts)

    kind = "dbcp"

    @classmethod
    def uniform(cls, toll, discount, n_edges=1, horizon=1):
        return cls(np.full((n_edges, horizon), float(toll)), np.full((n_edges, horizon), float(discount)))

    @property
    def horizon(self):
        return self.tolls.shape[1]

    def to_dict(self):
        return {"kind": "dbcp", "tolls": self.tolls.tolist(), "discounts": self.discounts.tolist()}


@dataclass(frozen=True, eq=False)
class CbcpPolicy:
    """Tolls shaped ``(n_edges, horizon)`` and one credit budget per eligible user over the horizon."""

    tolls: np.ndarray
    budget: float

    def __post_init__(self):
        object.__setattr__(self, "tolls", check_edge_time_array(self.tolls, "tolls"))
        object.__setattr__(self, "budget", check_nonnegative(self.budget, "budget"))

    kind = "cbcp"

    @classmethod
    def uniform(cls, toll, budget, n_edges=1, horizon=1):
        return cls(np.full((n_edges, horizon), float(toll)), float(budget))

    @property
    def horizon(self):
        return self.tolls.shape[1]

    def to_dict(self):
        return {"kind": "cbcp", "tolls": self.tolls.tolist(), "budget": self.budget}


@dataclass(frozen=True, eq=False)
class FlowPattern:
    """Per-group lane flows over the horizon.

    ``express`` and ``general`` have shape ``(n_groups, horizon, n_edges)``.
    ``credit`` is the budget-paid part of the express flow (CBCP only; all
    zeros under DBCP), so the out-of-pocket part is ``express - credit``.
    """

    kind: str
    express: np.ndarray
    general: np.ndarray
    credit: np.ndarray = None

    def __post_init__(self):
        express = np.asarray(self.express, dtype=float)
        general = np.asarray(self.general, dtype=float)
        credit = np.zeros_like(express) if self.credit is None else np.asarray(self.credit, dtype=float)
        if not (express.shape == general.shape == credit.shape) or express.ndim != 3:
            raise ValueError("express, general and credit must share shape (groups, horizon, edges)")
        object.__setattr__(self, "express", express)
        object.__setattr__(self, "general", general)
        object.__setattr__(self, "credit", credit)

    @property
    def pocket(self):
        return self.express - self.credit

    @property
    def shape(self):
        return self.express.shape

    def aggregate(self):
        """Lane flows ``x`` summed over groups, shape ``(horizon, n_edges, 2)``."""
        return np.stack([self.express.sum(axis=0), self.general.sum(axis=0)], axis=-1)

    def lane_flows(self):
        """Per-group flows ``(n_groups, horizon, n_edges, 2)``."""
        return np.stack([self.express, self.general], axis=-1)

    def conservation_residual(self, network, groups):
        """Largest absolute violation of flow continuity over groups, times and nodes."""
        net = validate(network)
        total = self.express + self.general
        worst = 0.0
        index = {n: i for i, n in enumerate(net.network.nodes)}
        for g, group in enumerate(groups):
            balance = np.zeros((self.shape[1], len(index)))
            for e, edge in enumerate(net.edges):
                balance[:, index[edge.tail]] += total[g, :, e]
                balance[:, index[edge.head]] -= total[g, :, e]
            balance[:, index[net.origin]] -= group.demand
            keep = [i for n, i in index.items() if n != net.destination]
            worst = max(worst, float(np.max(np.abs(balance[:, keep]), initial=0.0)))
        return worst

    def budget_spent(self, tolls):
        """Credit spent by each group over the horizon, ``sum(credit * toll)``."""
        tolls = np.asarray(tolls, dtype=float)
        return np.einsum("gte,et->g", self.credit, tolls)

    def to_dict(self):
        out = {"kind": self.kind, "express": self.express.tolist(), "general": self.general.tolist()}
        if self.kind == "cbcp":
            out["credit"] = self.credit.tolist()
            out["pocket"] = self.pocket.tolist()
        return out


def _lane_latency(network, edge, lane, t, aggregate):
    net = validate(network)
    return net.lane_fn(edge, lane)(max(float(aggregate[t, edge, lane]), 0.0))


def dbcp_cost(network, group: UserGroup, edge: int, lane: int, t: int, aggregate, policy: DbcpPolicy) -> float:
    """Money cost per user of ``group`` on one lane under a discount policy."""
    v = group.vot[t]
    travel = v * _lane_latency(network, edge, lane, t, aggregate)
    if lane == GENERAL:
        return travel
    toll = policy.tolls[edge, t]
    if group.eligible:
        return travel + (1.0 - policy.discounts[edge, t]) * toll
    return travel + toll


def cbcp_costs(network, group: UserGroup, edge: int, t: int, aggregate, policy: CbcpPolicy):
    """``(credit_cost, pocket_cost, general_cost)`` per user under a credit policy."""
    v = group.vot[t]
    travel = v * _lane_latency(network, edge, EXPRESS, t, aggregate)
    general = v * _lane_latency(network, edge, GENERAL, t, aggregate)
    return travel, travel + policy.tolls[edge, t], general


def dbcp_cost_table(network, groups, aggregate, policy: DbcpPolicy):
    """Vectorised :func:`dbcp_cost`: array ``(n_groups, horizon, n_edges, 2)``."""
    net = validate(network)
    lat = net.latencies.latency(np.maximum(aggregate, 0.0))
    vot = np.array([g.vot for g in groups])  # (G, T)
    eligible = np.array([g.eligible for g in groups])
    tolls = policy.tolls.T  # (T, E)
    out = vot[:, :, None, None] * lat[None]
    paid = np.where(eligible[:, None, None], (1.0 - policy.discounts.T)[None] * tolls[None], tolls[None])
    out[..., EXPRESS] += paid
    return out


def cbcp_cost_table(network, groups, aggregate, policy: CbcpPolicy):
    """Vectorised :func:`cbcp_costs`: array ``(n_groups, horizon, n_edges, 3)`` ordered credit, pocket, general."""
    net = validate(network)
    lat = net.latencies.latency(np.maximum(aggregate, 0.0))
    vot = np.array([g.vot for g in groups])
    travel = vot[:, :, None] * lat[None, :, :, EXPRESS]
    general = vot[:, :, None] * lat[None, :, :, GENERAL]
    pocket = travel + policy.tolls.T[None]
    return np.stack([travel, pocket, general], axis=-1)


@dataclass(frozen=True, eq=False)
class Scenario:
    groups: tuple
    policy: object
    horizon: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"groups": [g.to_dict() for g in self.groups], "policy": self.policy.to_dict(), "horizon": self.horizon}
        out.update(self.extra)
        return out


def policy_from_dict(data, n_edges, horizon):
    kind = data.get("kind")
    tolls = check_edge_time_array(data["tolls"], "tolls", n_edges, horizon)
    if kind == "dbcp":
        discounts = check_edge_time_array(data.get("discounts", 0.0), "discounts", n_edges, horizon, lo=0.0, hi=1.0)
        return DbcpPolicy(tolls, discounts)
    if kind == "cbcp":
        return CbcpPolicy(tolls, data["budget"])
    raise ValueError(f"policy.kind must be 'dbcp' or 'cbcp', got {kind!r}")


def scenario_from_dict(data, n_edges):
    horizon = int(data.get("horizon", 1))
    if horizon < 1:
        raise InvalidHorizon(f"horizon must be >= 1, got {horizon}")
    groups = []
    for i, g in enumerate(data["groups"]):
        group = UserGroup(str(g.get("id", i)), bool(g["eligible"]), g["vot"], g.get("demand", 1.0))
        groups.append(group.with_horizon(horizon))
    policy = policy_from_dict(data["policy"], n_edges, horizon)
    extra = {k: v for k, v in data.items() if k not in ("groups", "policy", "horizon")}
    return Scenario(tuple(groups), policy, horizon, extra)


def load_scenario(path, n_edges):
    with open(Path(path)) as fh:
        return scenario_from_dict(json.load(fh), n_edges)
