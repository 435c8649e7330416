"""DBCP and CBCP equilibria via Frank-Wolfe on their convex programs.

Both programs minimise, in time units,

    sum_t sum_e [ sum_k int_0^{x_{e,k,t}} l_{e,k} + sum_g (paid express flow) * toll / v_t^g ]

over the product of per-group flow polytopes. Under DBCP the paid toll is
``(1 - alpha) * tau`` for eligible groups; under CBCP only the out-of-pocket
express flow pays, and eligible groups share a budget across the horizon.

The default ``method="pairwise"`` alternates three moves per iteration:
a pairwise Frank-Wolfe step taken jointly by all blocks, a block-by-block
pairwise sweep (a block is one group at one time, or one eligible CBCP group
over the whole horizon), and Newton steps on the weights of the atoms found so
far. Every step uses an exact line search, so the objective never increases.
``method="classic"`` is the textbook simultaneous Frank-Wolfe step and the only
method that accepts the harmonic ``2 / (k + 2)`` step rule.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_scalar
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    ConvergenceWarning,
    InfeasibleFlow,
    InvalidHorizon,
    TimeVaryingEligibleVot,
)
from .network import EXPRESS, GENERAL, _cheapest_route, validate
from .policies import (
    CbcpPolicy,
    DbcpPolicy,
    FlowPattern,
    UserGroup,
    cbcp_cost_table,
    dbcp_cost_table,
)

logger = logging.getLogger(__name__)

CREDIT, POCKET, GENERAL_MODE = 0, 1, 2

_BUDGET_BISECTIONS = 64
_LINE_SEARCH_BISECTIONS = 100
_STALL_WINDOW = 200
_MASTER_STEPS = 20


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 200_000
    gap_tol: float = 1e-6
    line_search: str = "exact"
    method: str = "pairwise"
    init: str = "general"
    seed: int | None = 0

    def __post_init__(self):
        check_scalar(self.max_iters, "max_iters", int, min_val=1)
        check_scalar(self.gap_tol, "gap_tol", (int, float), min_val=0, include_boundaries="neither")
        if self.line_search not in ("exact", "harmonic"):
            raise ValueError(f"line_search must be 'exact' or 'harmonic', got {self.line_search!r}")
        if self.method not in ("pairwise", "classic"):
            raise ValueError(f"method must be 'pairwise' or 'classic', got {self.method!r}")
        if self.line_search == "harmonic" and self.method != "classic":
            raise ValueError("the harmonic step rule needs method='classic'")
        if self.init not in ("general", "random"):
            raise ValueError(f"init must be 'general' or 'random', got {self.init!r}")


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    """Equilibrium flows and their certificates.

    ``vi_gap``, ``per_group_cost``, ``total_cost`` and ``budget_spent`` are in
    money units; ``objective`` and the histories are in the time units of the
    convex program.
    """

    kind: str
    flows: FlowPattern
    aggregate: np.ndarray
    vi_gap: float
    iterations: int
    per_group_cost: np.ndarray
    total_cost: float
    budget_spent: np.ndarray
    converged: bool
    objective: float
    objective_history: list = field(default_factory=list, repr=False)
    gap_history: list = field(default_factory=list, repr=False)

    def eligible_express(self, groups, t=None):
        """Express flow of eligible groups, summed over groups and averaged over time (or at ``t``)."""
        mask = np.array([g.eligible for g in groups])
        flow = self.flows.express[mask].sum(axis=0)  # (T, E)
        return float(flow[t].sum()) if t is not None else float(flow.sum(axis=1).mean())

    def to_dict(self):
        return {
            "kind": self.kind,
            "converged": self.converged,
            "iterations": self.iterations,
            "vi_gap": self.vi_gap,
            "total_cost": self.total_cost,
            "objective": self.objective,
            "per_group_cost": self.per_group_cost.tolist(),
            "budget_spent": self.budget_spent.tolist(),
            "aggregate": self.aggregate.tolist(),
            "flows": self.flows.to_dict(),
        }


# ---------------------------------------------------------------------------
# linear subproblems


def linear_subproblem_dbcp(network, group: UserGroup, t: int, lane_costs):
    """All of the group's demand on the cheapest route for ``lane_costs`` ``(n_edges, 2)``.

    Costs are divided by the group's VoT at ``t`` first, which leaves the
    minimiser unchanged. Returns lane flows of shape ``(n_edges, 2)``.
    """
    net = validate(network)
    costs = np.asarray(lane_costs, dtype=float) / group.vot[t]
    route = _cheapest_route(net, costs)
    flow = np.zeros((net.n_edges, 2))
    for e, k in route.steps:
        flow[e, k] = group.demand
    return flow


def linear_subproblem_cbcp_eligible(network, lane_costs, tolls, budget, demand=1.0):
    """Minimise a linear cost over one eligible group's budget-constrained flow set.

    ``lane_costs`` has shape ``(horizon, n_edges, 3)`` ordered (credit,
    out-of-pocket, general) and ``tolls`` is ``(n_edges, horizon)`` like the
    policies. Returns the extreme flow as ``(horizon, n_edges, 3)``.
    """
    net = validate(network)
    costs = np.asarray(lane_costs, dtype=float)
    tolls_te = np.asarray(tolls, dtype=float)
    if costs.ndim != 3 or costs.shape[1:] != (net.n_edges, 3):
        raise ValueError(f"lane_costs must have shape (horizon, {net.n_edges}, 3)")
    if tolls_te.shape != (net.n_edges, costs.shape[0]):
        raise ValueError("tolls must have shape (n_edges, horizon)")
    return _budget_lmo(net, costs, tolls_te.T, float(budget), float(demand))


def _lagrangian_choice(net, costs, tolls, nu, demand):
    """Best flow for the budget-priced costs; ``nu=None`` prices credit out entirely."""
    credit, pocket, general = costs[..., 0], costs[..., 1], costs[..., 2]
    if nu is None:
        use_credit = np.zeros(credit.shape, dtype=bool)
    else:
        use_credit = nu * tolls < pocket - credit
    express = np.where(use_credit, credit + (nu or 0.0) * tolls, pocket)
    atom = np.zeros(costs.shape)
    for t in range(costs.shape[0]):
        route = _cheapest_route(net, np.stack([express[t], general[t]], axis=-1))
        for e, k in route.steps:
            if k == GENERAL:
                atom[t, e, GENERAL_MODE] = demand
            elif use_credit[t, e]:
                atom[t, e, CREDIT] = demand
            else:
                atom[t, e, POCKET] = demand
    spent = np.sum(atom[..., CREDIT] * tolls, axis=1)
    return atom, spent


def _budget_lmo(net, costs, tolls, budget, demand):
    """Search for the critical budget multiplier, then exhaust the budget exactly.

    ``tolls`` is ``(horizon, n_edges)`` here. At the critical multiplier both
    bracketing choices are Lagrangian-optimal; credit moves from the cheaper
    to the richer one in ascending (time, edge) order until ``budget`` is used.
    """
    atom, spent = _lagrangian_choice(net, costs, tolls, 0.0, demand)
    if spent.sum() <= budget:
        return atom
    tolled = tolls > 0
    rates = (costs[..., POCKET] - costs[..., CREDIT])[tolled] / tolls[tolled]
    lo, hi = 0.0, float(np.max(rates))
    rich, rich_spent = atom, spent
    # at hi no credit is worth buying; rounding in the rate can hide that, so
    # the lean end is built with credit priced out explicitly
    lean, lean_spent = _lagrangian_choice(net, costs, tolls, None, demand)
    # Each candidate flow is a line nu -> c.a + nu * spent(a) in the Lagrangian.
    # Stepping to the crossing of the two bracketing lines lands on the
    # critical multiplier once no third flow undercuts them there; steps that
    # fall outside the bracket revert to bisection.
    for _ in range(_BUDGET_BISECTIONS):
        c_rich, c_lean = float(np.sum(costs * rich)), float(np.sum(costs * lean))
        s_rich, s_lean = rich_spent.sum(), lean_spent.sum()
        secant = s_rich > s_lean
        if secant:
            nu = (c_lean - c_rich) / (s_rich - s_lean)
            secant = lo < nu < hi
        if not secant:
            nu = 0.5 * (lo + hi)
            if not lo < nu < hi:
                break
        cand, cand_spent = _lagrangian_choice(net, costs, tolls, nu, demand)
        value = float(np.sum(costs * cand)) + nu * cand_spent.sum()
        line = c_rich + nu * s_rich
        if secant and value >= line - 1e-12 * (1.0 + abs(line)):
            break
        if cand_spent.sum() > budget:
            lo, rich, rich_spent = nu, cand, cand_spent
        else:
            hi, lean, lean_spent = nu, cand, cand_spent
    out = lean.copy()
    remaining = budget - lean_spent.sum()
    for t in range(costs.shape[0]):
        if remaining <= 0:
            break
        if np.array_equal(rich[t], lean[t]):
            continue
        same_lanes = np.array_equal(
            rich[t, :, CREDIT] + rich[t, :, POCKET], lean[t, :, CREDIT] + lean[t, :, POCKET]
        )
        if same_lanes:
            for e in range(costs.shape[1]):
                shift = rich[t, e, CREDIT] - lean[t, e, CREDIT]
                cost = shift * tolls[t, e]
                if cost <= 0:
                    continue
                frac = min(1.0, remaining / cost)
                out[t, e, CREDIT] += frac * shift
                out[t, e, POCKET] -= frac * shift
                remaining -= frac * cost
                if remaining <= 0:
                    break
        else:
            delta = rich_spent[t] - lean_spent[t]
            theta = 1.0 if delta <= 0 else min(1.0, remaining / delta)
            out[t] = theta * rich[t] + (1.0 - theta) * lean[t]
            remaining -= theta * delta
    return out


# ---------------------------------------------------------------------------
# problem assembly


class _Block:
    __slots__ = ("g", "times", "budget", "scale", "atoms")

    def __init__(self, g, times, budget, scale):
        self.g = g
        self.times = np.asarray(times)
        self.budget = budget
        self.scale = scale  # money per time unit (the block's constant VoT)
        self.atoms = {}

    def set_atoms(self, pairs):
        self.atoms = {}
        for atom, weight in pairs:
            key = atom.tobytes()
            if key in self.atoms:
                self.atoms[key][1] += weight
            else:
                self.atoms[key] = [atom, weight]

    def point(self):
        return sum(w * a for a, w in self.atoms.values())


class _Problem:
    """One convex program over the times ``times`` of the horizon."""

    def __init__(self, net, groups, kind, tolls, discounts, budget, times):
        self.net = net
        self.lat = net.latencies
        self.kind = kind
        self.times = list(times)
        T, E, G = len(self.times), net.n_edges, len(groups)
        self.shape = (G, T, E, 3)
        self.demand = np.array([g.demand for g in groups])
        self.vot = np.array([[g.vot[t] for t in self.times] for g in groups])
        self.tolls = np.asarray(tolls, dtype=float)[:, self.times].T  # (T, E)
        self.budget = budget
        if kind == "dbcp":
            disc = np.asarray(discounts, dtype=float)[:, self.times].T
            elig = np.array([g.eligible for g in groups], dtype=float)
            paid = self.tolls[None] * (1.0 - elig[:, None, None] * disc[None])
        else:
            paid = np.broadcast_to(self.tolls[None], (G, T, E))
        self.coef = paid / self.vot[:, :, None]  # (G, T, E)
        self.blocks = []
        for g, group in enumerate(groups):
            if group.demand == 0:
                continue
            if kind == "cbcp" and group.eligible:
                self.blocks.append(_Block(g, range(T), True, float(self.vot[g, 0])))
            else:
                for t in range(T):
                    self.blocks.append(_Block(g, [t], False, float(self.vot[g, t])))

    def aggregate(self, y):
        return np.stack([y[..., CREDIT].sum(axis=0) + y[..., POCKET].sum(axis=0), y[..., GENERAL_MODE].sum(axis=0)], axis=-1)

    def objective(self, y, x):
        return float(np.sum(self.lat.integral(x)) + np.sum(self.coef * y[..., POCKET]))

    def block_grad(self, b, x):
        lat = self.lat.latency(x[b.times])
        express = lat[..., EXPRESS]
        return np.stack([express, express + self.coef[b.g, b.times], lat[..., GENERAL]], axis=-1)

    def lmo(self, b, grad):
        d = self.demand[b.g]
        if b.budget:
            return _budget_lmo(self.net, grad, self.tolls[b.times], self.budget, d)
        route = _cheapest_route(self.net, grad[0, :, POCKET:])
        atom = np.zeros(grad.shape)
        for e, k in route.steps:
            atom[0, e, POCKET if k == EXPRESS else GENERAL_MODE] = d
        return atom

    def initial_atoms(self, b, rng):
        if rng is None:
            costs = np.full((len(b.times), self.net.n_edges, 3), np.inf)
            costs[..., GENERAL_MODE] = 1.0
            if b.budget:
                return [(self._general_only(b), 1.0)]
            return [(self.lmo(b, costs), 1.0)]
        pairs = []
        weights = rng.dirichlet(np.ones(3))
        for w in weights:
            costs = rng.uniform(0.0, 1.0, (len(b.times), self.net.n_edges, 3))
            costs[..., POCKET] = costs[..., CREDIT] + rng.uniform(0.0, 1.0, costs.shape[:2])
            pairs.append((self.lmo(b, costs), float(w)))
        return pairs

    def _general_only(self, b):
        atom = np.zeros((len(b.times), self.net.n_edges, 3))
        costs = np.stack([np.full(self.net.n_edges, np.inf), np.ones(self.net.n_edges)], axis=-1)
        route = _cheapest_route(self.net, costs)
        for e, _ in route.steps:
            atom[:, e, GENERAL_MODE] = self.demand[b.g]
        return atom

    def direction_slope(self, x_rows, dx, linear):
        """``gamma -> (phi'(gamma), phi''(gamma))`` along the aggregate direction ``dx``."""

        def slope(gamma):
            z = x_rows + gamma * dx
            first = float(np.sum(self.lat.latency(z) * dx)) + linear
            second = float(np.sum(self.lat.prime(z) * dx * dx))
            return first, second

        return slope


def _exact_step(slope, gmax):
    """Minimiser of a convex scalar function on ``[0, gmax]`` by safeguarded Newton."""
    f_hi, _ = slope(gmax)
    if f_hi <= 0:
        return gmax
    f_lo, _ = slope(0.0)
    if f_lo >= 0:
        return 0.0
    lo, hi = 0.0, gmax
    gamma = gmax * f_lo / (f_lo - f_hi)
    for _ in range(_LINE_SEARCH_BISECTIONS):
        f, curv = slope(gamma)
        if f > 0:
            hi = gamma
        elif f < 0:
            lo = gamma
        else:
            return gamma
        nxt = gamma - f / curv if curv > 0 else np.nan
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if nxt == gamma or not lo < nxt < hi:
            break
        gamma = nxt
    return gamma


@dataclass
class _RunOutput:
    y: np.ndarray
    converged: bool
    iterations: int
    objective_history: list
    gap_history: list


def _run(problem: _Problem, options: SolverOptions, tol_offset: float = 1.0, rng=None) -> _RunOutput:
    """Frank-Wolfe main loop; stops when the money-valued gap meets the tolerance."""
    y = np.zeros(problem.shape)
    for b in problem.blocks:
        b.set_atoms(problem.initial_atoms(b, rng))
        y[b.g, b.times] = b.point()
    x = problem.aggregate(y)

    obj_hist, gap_hist = [], []
    best_gap, best_y = np.inf, y.copy()
    converged = False
    iterations = 0

    def survey():
        x[...] = problem.aggregate(y)
        grads, targets, gap_norm, gap_money, cost_money = [], [], 0.0, 0.0, 0.0
        for b in problem.blocks:
            grad = problem.block_grad(b, x)
            s = problem.lmo(b, grad)
            yb = y[b.g, b.times]
            g_b = float(np.sum(grad * (yb - s)))
            grads.append(grad)
            targets.append(s)
            gap_norm += g_b
            gap_money += b.scale * g_b
            cost_money += b.scale * float(np.sum(grad * yb))
        return grads, targets, gap_norm, max(gap_money, 0.0), cost_money

    while True:
        grads, targets, gap_norm, gap_money, cost_money = survey()
        obj_hist.append(problem.objective(y, x))
        gap_hist.append(gap_norm)
        if gap_money < best_gap:
            best_gap, best_y = gap_money, y.copy()
        if gap_money <= options.gap_tol * (tol_offset + abs(cost_money)):
            converged = True
            best_y = y
            break
        if iterations >= options.max_iters:
            break
        if len(obj_hist) > _STALL_WINDOW:
            old = obj_hist[-_STALL_WINDOW - 1]
            if old - obj_hist[-1] <= 1e-15 * (1.0 + abs(old)):
                logger.debug("objective stalled after %d iterations", iterations)
                break
        iterations += 1
        if options.method == "classic":
            moved = _classic_step(problem, y, x, grads, targets, iterations, options)
        else:
            joint = _joint_step(problem, y, x, grads, targets)
            moved = _pairwise_sweep(problem, y, x) or joint
            for _ in range(_MASTER_STEPS):
                if _master_newton(problem, y, x) <= 0.01 * gap_money:
                    break
        if not moved:
            grads, targets, gap_norm, gap_money, cost_money = survey()
            if gap_money < best_gap:
                best_gap, best_y = gap_money, y.copy()
            converged = gap_money <= options.gap_tol * (tol_offset + abs(cost_money))
            best_y = y if converged else best_y
            break
    return _RunOutput(best_y, converged, iterations, obj_hist, gap_hist)


def _away(b, grad):
    live = [(key, a, w) for key, (a, w) in b.atoms.items() if w > 0]
    scores = [float(np.sum(grad * a)) for _, a, _ in live]
    return live[int(np.argmax(scores))]


def _move(problem, y, x, b, away_key, s, gamma):
    """Shift weight ``gamma`` from atom ``away_key`` to ``s`` and update ``y`` and ``x``."""
    w_away = b.atoms[away_key][1]
    key_s = s.tobytes()
    if gamma >= w_away:
        del b.atoms[away_key]
    else:
        b.atoms[away_key][1] = w_away - gamma
    if key_s in b.atoms:
        b.atoms[key_s][1] += gamma
    else:
        b.atoms[key_s] = [s, gamma]
    new = b.point()
    diff = new - y[b.g, b.times]
    y[b.g, b.times] = new
    x[b.times, :, EXPRESS] += diff[..., CREDIT] + diff[..., POCKET]
    x[b.times, :, GENERAL] += diff[..., GENERAL_MODE]


def _lane_direction(d):
    return np.stack([d[..., CREDIT] + d[..., POCKET], d[..., GENERAL_MODE]], axis=-1)


def _joint_step(problem, y, x, grads, targets):
    """One pairwise step taken by every improving block at once.

    Groups that trade places on the same lanes leave the aggregate flow
    unchanged, which block-by-block steps only approach geometrically.
    """
    moves = []
    for b, grad, s in zip(problem.blocks, grads, targets):
        key, away, w_away = _away(b, grad)
        d = s - away
        if float(np.sum(grad * d)) < 0.0:
            moves.append((b, key, s, d, w_away))
    if len(moves) < 2:
        return False
    dx = np.zeros_like(x)
    linear = 0.0
    for b, _, _, d, _ in moves:
        dx[b.times] += _lane_direction(d)
        linear += float(np.sum(problem.coef[b.g, b.times] * d[..., POCKET]))
    gmax = min(m[4] for m in moves)
    gamma = _exact_step(problem.direction_slope(x.copy(), dx, linear), gmax)
    if gamma <= 0.0:
        return False
    for b, key, s, _, _ in moves:
        _move(problem, y, x, b, key, s, gamma)
    return True


def _pairwise_sweep(problem, y, x):
    moved = False
    for b in problem.blocks:
        grad = problem.block_grad(b, x)
        s = problem.lmo(b, grad)
        key, away, w_away = _away(b, grad)
        d = s - away
        if float(np.sum(grad * d)) >= 0.0:
            continue
        linear = float(np.sum(problem.coef[b.g, b.times] * d[..., POCKET]))
        gamma = _exact_step(problem.direction_slope(x[b.times], _lane_direction(d), linear), w_away)
        if gamma <= 0.0:
            continue
        moved = True
        _move(problem, y, x, b, key, s, gamma)
    return moved


def _master_newton(problem, y, x):
    """One regularised Newton step over the weights of all active atoms.

    The weights of each block stay on their simplex. Directions of zero
    curvature (groups swapping lanes) get a long step that the ratio test
    stops at the face boundary, where an atom drops out. Returns the
    money-valued gap restricted to the active atoms.
    """
    entries = []  # (block, key, atom)
    for b in problem.blocks:
        for key, (atom, w) in b.atoms.items():
            entries.append((b, key, atom, w))
    n = len(entries)
    if n == len(problem.blocks):
        return 0.0
    cols = np.zeros((n,) + x.shape)
    lin = np.zeros(n)
    w = np.zeros(n)
    for i, (b, _, atom, weight) in enumerate(entries):
        cols[i][b.times] = _lane_direction(atom)
        lin[i] = float(np.sum(problem.coef[b.g, b.times] * atom[..., POCKET]))
        w[i] = weight
    flat = cols.reshape(n, -1)
    grad = flat @ problem.lat.latency(x).ravel() + lin
    hess = (flat * problem.lat.prime(x).ravel()) @ flat.T
    block_ids = [id(e[0]) for e in entries]
    blocks = list(dict.fromkeys(block_ids))
    cons = np.array([[1.0 if bid == blk else 0.0 for bid in block_ids] for blk in blocks])
    local_gap = 0.0
    for blk in blocks:
        idx = [i for i, bid in enumerate(block_ids) if bid == blk]
        scale = entries[idx[0]][0].scale
        local_gap += scale * (max(grad[idx]) - min(grad[idx]))
    m = len(blocks)
    reg = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(hess)))))
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = hess + reg * np.eye(n)
    kkt[:n, n:] = cons.T
    kkt[n:, :n] = cons
    rhs = np.concatenate([-grad, np.zeros(m)])
    step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
    # keep every block on its simplex exactly; rounding in the solve leaks otherwise
    step -= cons.T @ ((cons @ step) / cons.sum(axis=1))
    size = float(np.max(np.abs(step)))
    if size <= 1e-15 or not np.isfinite(size):
        return local_gap
    if size > 1.0:
        step /= size
    neg = step < 0
    if not neg.any() or float(grad @ step) >= -1e-14 * float(np.max(np.abs(grad))):
        return local_gap
    gmax = float(np.min(w[neg] / -step[neg]))
    dx = np.tensordot(step, cols, axes=1)
    gamma = _exact_step(problem.direction_slope(x.copy(), dx, float(lin @ step)), gmax)
    if gamma <= 0.0:
        return local_gap
    before = float(np.sum(problem.lat.integral(x))) + float(lin @ w)
    w = w + gamma * step
    if gamma >= gmax:
        w[np.argmin(np.where(neg, w, np.inf))] = 0.0
    w = np.maximum(w, 0.0)
    trial = np.tensordot(w, cols, axes=1)
    if float(np.sum(problem.lat.integral(trial))) + float(lin @ w) > before:
        return local_gap
    for blk in blocks:
        idx = [i for i, bid in enumerate(block_ids) if bid == blk]
        b = entries[idx[0]][0]
        keep = [(entries[i][2], w[i]) for i in idx if w[i] > 0.0]
        total = sum(v for _, v in keep)
        b.set_atoms([(a, v / total) for a, v in keep])
        y[b.g, b.times] = b.point()
    x[...] = problem.aggregate(y)
    return local_gap


def _classic_step(problem, y, x, grads, targets, k, options):
    d = np.zeros_like(y)
    for b, s in zip(problem.blocks, targets):
        d[b.g, b.times] = s - y[b.g, b.times]
    dx = problem.aggregate(d)
    if options.line_search == "harmonic":
        gamma = 2.0 / (k + 2.0)
    else:
        linear = float(np.sum(problem.coef * d[..., POCKET]))
        gamma = _exact_step(problem.direction_slope(x, dx, linear), 1.0)
    if gamma <= 0.0:
        return False
    for b, s in zip(problem.blocks, targets):
        pairs = [(a, (1.0 - gamma) * w) for a, w in b.atoms.values()] + [(s, gamma)]
        b.set_atoms([(a, w) for a, w in pairs if w > 0])
        y[b.g, b.times] = b.point()
    x[...] = problem.aggregate(y)
    return True


# ---------------------------------------------------------------------------
# public solvers


def _prepare(network, groups, policy):
    groups = [g.with_horizon(policy.horizon) for g in groups]
    total = sum(g.demand for g in groups)
    net = validate(network, total_demand=total if total > 0 else 1.0)
    if policy.tolls.shape[0] != net.n_edges:
        raise InvalidHorizon(f"policy has {policy.tolls.shape[0]} edge rows, network has {net.n_edges} edges")
    if not groups:
        raise ValueError("at least one user group is required")
    return net, groups


def _rng(options):
    if options.init != "random":
        return None
    return np.random.Generator(np.random.Philox(options.seed))


def _to_flows(kind, y):
    return FlowPattern(kind, express=y[..., CREDIT] + y[..., POCKET], general=y[..., GENERAL_MODE],
                       credit=y[..., CREDIT] if kind == "cbcp" else None)


def _paid_rates(kind, groups, policy):
    """Out-of-pocket express toll per unit of travel time, ``(G, T, E)``."""
    vot = np.array([g.vot for g in groups])[:, :, None]
    tolls = policy.tolls.T[None]
    if kind == "dbcp":
        elig = np.array([g.eligible for g in groups], dtype=float)[:, None, None]
        return tolls * (1.0 - elig * policy.discounts.T[None]) / vot
    return np.broadcast_to(tolls, vot.shape[:2] + tolls.shape[2:]) / vot


def _canonical_split(kind, groups, policy, y):
    """Pick one representative when groups tie on the paid express lane.

    Two groups paying the same toll per unit time on an edge can trade
    express for general flow there without changing the objective, the
    aggregate flows or either group's conservation, so every such trade is
    another equilibrium. The express flow goes to ineligible groups first,
    then to groups in input order.
    """
    rates = _paid_rates(kind, groups, policy)
    order = sorted(range(len(groups)), key=lambda g: (groups[g].eligible, g))
    y = y.copy()
    for pos, hi in enumerate(order):
        for lo in reversed(order[pos + 1:]):
            tie = np.abs(rates[hi] - rates[lo]) <= 1e-12 * np.maximum(1.0, np.abs(rates[hi]))
            shift = np.where(tie, np.minimum(y[lo, ..., POCKET], y[hi, ..., GENERAL_MODE]), 0.0)
            y[lo, ..., POCKET] -= shift
            y[lo, ..., GENERAL_MODE] += shift
            y[hi, ..., POCKET] += shift
            y[hi, ..., GENERAL_MODE] -= shift
    return y


def _finish(kind, net, groups, policy, y, runs_ok, iterations, obj_hist, gap_hist, options):
    flows = _to_flows(kind, _canonical_split(kind, groups, policy, y))
    aggregate = flows.aggregate()
    gap = vi_gap(flows, net, groups, policy)
    per_group = group_costs(flows, net, groups, policy)
    total = float(per_group.sum())
    converged = bool(runs_ok and gap <= options.gap_tol * (1.0 + abs(total)))
    if not converged:
        warnings.warn(
            f"{kind.upper()} solve stopped after {iterations} iterations with VI gap {gap:.3e}",
            ConvergenceWarning,
            stacklevel=3,
        )
    spent = flows.budget_spent(policy.tolls) if kind == "cbcp" else np.zeros(len(groups))
    return EquilibriumResult(
        kind=kind,
        flows=flows,
        aggregate=aggregate,
        vi_gap=gap,
        iterations=iterations,
        per_group_cost=per_group,
        total_cost=total,
        budget_spent=spent,
        converged=converged,
        objective=convex_objective(flows, net, groups, policy),
        objective_history=obj_hist,
        gap_history=gap_hist,
    )


def solve_dbcp(network, groups, policy: DbcpPolicy, options: SolverOptions | None = None) -> EquilibriumResult:
    """Discount-policy equilibrium, solved one time step at a time."""
    options = options or SolverOptions()
    net, groups = _prepare(network, groups, policy)
    T = policy.horizon
    rng = _rng(options)
    y = np.zeros((len(groups), T, net.n_edges, 3))
    runs_ok, iterations, obj_hist, gap_hist = True, 0, [], []
    for t in range(T):
        problem = _Problem(net, groups, "dbcp", policy.tolls, policy.discounts, None, [t])
        out = _run(problem, options, tol_offset=1.0 / T, rng=rng)
        y[:, t] = out.y[:, 0]
        runs_ok &= out.converged
        iterations += out.iterations
        obj_hist.append(out.objective_history)
        gap_hist.append(out.gap_history)
    if T == 1:
        obj_hist, gap_hist = obj_hist[0], gap_hist[0]
    return _finish("dbcp", net, groups, policy, y, runs_ok, iterations, obj_hist, gap_hist, options)


def solve_cbcp(network, groups, policy: CbcpPolicy, options: SolverOptions | None = None) -> EquilibriumResult:
    """Credit-policy equilibrium; eligible groups must have a constant VoT."""
    options = options or SolverOptions()
    net, groups = _prepare(network, groups, policy)
    for g in groups:
        if g.eligible and not g.time_invariant:
            raise TimeVaryingEligibleVot(f"eligible group {g.id} has a time-varying VoT")
    problem = _Problem(net, groups, "cbcp", policy.tolls, None, policy.budget, range(policy.horizon))
    out = _run(problem, options, rng=_rng(options))
    return _finish("cbcp", net, groups, policy, out.y, out.converged, out.iterations,
                   out.objective_history, out.gap_history, options)


def solve(network, groups, policy, options=None):
    if policy.kind == "dbcp":
        return solve_dbcp(network, groups, policy, options)
    return solve_cbcp(network, groups, policy, options)


# ---------------------------------------------------------------------------
# certificates


def check_feasible(flows: FlowPattern, network, groups, policy, atol=1e-8):
    net = validate(network)
    if flows.shape != (len(groups), policy.horizon, net.n_edges):
        raise InfeasibleFlow(f"flow shape {flows.shape} does not match groups/horizon/edges")
    floor = -atol
    if flows.general.min() < floor or flows.credit.min() < floor or flows.pocket.min() < floor:
        raise InfeasibleFlow("negative flow component")
    scale = max(1.0, max(g.demand for g in groups))
    residual = flows.conservation_residual(net, groups)
    if residual > atol * scale:
        raise InfeasibleFlow(f"flow conservation violated by {residual:.3e}")
    if flows.kind == "cbcp":
        spent = flows.budget_spent(policy.tolls)
        for g, group in enumerate(groups):
            if not group.eligible and np.any(np.abs(flows.credit[g]) > atol):
                raise InfeasibleFlow(f"ineligible group {group.id} carries credit-paid flow")
            if group.eligible and spent[g] > policy.budget + max(atol, 1e-9):
                raise InfeasibleFlow(f"group {group.id} overspends its budget: {spent[g]:.6g} > {policy.budget:.6g}")
    elif np.any(np.abs(flows.credit) > atol):
        raise InfeasibleFlow("credit-paid flow under a discount policy")


def vi_gap(flows: FlowPattern, network, groups, policy) -> float:
    """Total money each group could save by a best response to the current costs.

    Zero exactly at a DBCP/CBCP equilibrium.
    """
    net = validate(network)
    groups = [g.with_horizon(policy.horizon) for g in groups]
    check_feasible(flows, net, groups, policy)
    x = flows.aggregate()
    gap = 0.0
    if policy.kind == "dbcp":
        costs = dbcp_cost_table(net, groups, x, policy)
        for g, group in enumerate(groups):
            for t in range(policy.horizon):
                current = float(np.sum(costs[g, t] * np.stack([flows.express[g, t], flows.general[g, t]], -1)))
                best = _cheapest_route(net, costs[g, t]).cost * group.demand
                gap += current - best
        return max(gap, 0.0)
    costs = cbcp_cost_table(net, groups, x, policy)
    tolls = policy.tolls.T
    for g, group in enumerate(groups):
        current_flow = np.stack([flows.credit[g], flows.pocket[g], flows.general[g]], axis=-1)
        current = float(np.sum(costs[g] * current_flow))
        if group.eligible:
            target = _budget_lmo(net, costs[g], tolls, policy.budget, group.demand)
            best = float(np.sum(costs[g] * target))
        else:
            best = sum(_cheapest_route(net, costs[g, t, :, 1:]).cost for t in range(policy.horizon)) * group.demand
        gap += current - best
    return max(gap, 0.0)


def group_costs(flows: FlowPattern, network, groups, policy) -> np.ndarray:
    """Money cost (travel plus out-of-pocket tolls) of each group over the horizon."""
    net = validate(network)
    x = flows.aggregate()
    if policy.kind == "dbcp":
        costs = dbcp_cost_table(net, groups, x, policy)
        return np.einsum("gtek,gtek->g", costs, flows.lane_flows())
    costs = cbcp_cost_table(net, groups, x, policy)
    stacked = np.stack([flows.credit, flows.pocket, flows.general], axis=-1)
    return np.einsum("gtem,gtem->g", costs, stacked)


def convex_objective(flows: FlowPattern, network, groups, policy) -> float:
    """Value of the equilibrium convex program (time units) at ``flows``."""
    net = validate(network)
    x = flows.aggregate()
    vot = np.array([g.with_horizon(policy.horizon).vot for g in groups])
    tolls = policy.tolls.T[None]
    if policy.kind == "dbcp":
        elig = np.array([g.eligible for g in groups], dtype=float)[:, None, None]
        paid = flows.express * tolls * (1.0 - elig * policy.discounts.T[None])
    else:
        paid = flows.pocket * tolls
    return float(np.sum(net.latencies.integral(x)) + np.sum(paid / vot[:, :, None]))


# ---------------------------------------------------------------------------
# estimator front ends


class _EquilibriumEstimator(BaseEstimator):
    kind = None

    def _options(self):
        return SolverOptions(
            max_iters=self.max_iters,
            gap_tol=self.gap_tol,
            line_search=self.line_search,
            method=self.method,
            init=self.init,
            seed=self.random_state,
        )

    def _horizon(self, groups):
        tolls = np.asarray(self.tolls, dtype=float)
        if tolls.ndim == 2:
            return tolls.shape[1]
        return max(g.horizon for g in groups)

    def fit(self, network, groups):
        net = validate(network)
        groups = list(groups)
        policy = self._policy(net.n_edges, self._horizon(groups))
        self.policy_ = policy
        self.groups_ = [g.with_horizon(policy.horizon) for g in groups]
        self.result_ = solve(net, self.groups_, policy, self._options())
        self.flows_ = self.result_.flows
        self.aggregate_ = self.result_.aggregate
        self.vi_gap_ = self.result_.vi_gap
        self.converged_ = self.result_.converged
        self.n_iter_ = self.result_.iterations
        return self

    def eligible_express_share(self):
        """Time-averaged eligible express flow divided by eligible demand."""
        check_is_fitted(self, "result_")
        demand = sum(g.demand for g in self.groups_ if g.eligible)
        return self.result_.eligible_express(self.groups_) / demand if demand else 0.0


class DBCPEquilibrium(_EquilibriumEstimator):
    """Estimator-style wrapper around :func:`solve_dbcp`.

    ``tolls`` and ``discounts`` are scalars or ``(n_edges, horizon)`` arrays.
    """

    kind = "dbcp"

    def __init__(self, tolls=0.0, discounts=0.0, *, max_iters=200_000, gap_tol=1e-6,
                 line_search="exact", method="pairwise", init="general", random_state=0):
        self.tolls = tolls
        self.discounts = discounts
        self.max_iters = max_iters
        self.gap_tol = gap_tol
        self.line_search = line_search
        self.method = method
        self.init = init
        self.random_state = random_state

    def _policy(self, n_edges, horizon):
        tolls = np.broadcast_to(np.asarray(self.tolls, dtype=float), (n_edges, horizon))
        discounts = np.broadcast_to(np.asarray(self.discounts, dtype=float), (n_edges, horizon))
        return DbcpPolicy(tolls, discounts)


class CBCPEquilibrium(_EquilibriumEstimator):
    """Estimator-style wrapper around :func:`solve_cbcp`."""

    kind = "cbcp"

    def __init__(self, tolls=0.0, budget=0.0, *, max_iters=200_000, gap_tol=1e-6,
                 line_search="exact", method="pairwise", init="general", random_state=0):
        self.tolls = tolls
        self.budget = budget
        self.max_iters = max_iters
        self.gap_tol = gap_tol
        self.line_search = line_search
        self.method = method
        self.init = init
        self.random_state = random_state

    def _policy(self, n_edges, horizon):
        tolls = np.broadcast_to(np.asarray(self.tolls, dtype=float), (n_edges, horizon))
        return CbcpPolicy(tolls, self.budget)
