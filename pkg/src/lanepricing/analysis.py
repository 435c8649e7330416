"""Societal cost, Pareto-weighted policy grid search and sensitivity sweeps."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone

from ._validation import check_alpha_grid, check_nonnegative, check_positive
from .equilibrium import CBCPEquilibrium, DBCPEquilibrium, SolverOptions
from .exceptions import ConvergenceWarning, NotConvergedError
from .network import EXPRESS, GENERAL, single_edge_network, validate
from .policies import UserGroup

# Sweeps compare against closed forms at 1e-4, so they run much tighter than
# the solver default.
ANALYSIS_OPTIONS = SolverOptions(gap_tol=1e-10)

DEFAULT_TOLLS = np.arange(0.0, 21.0, 1.0)
DEFAULT_BUDGETS = np.arange(0.0, 95.0, 5.0)

GRID_COLUMNS = (
    "tau",
    "budget",
    "f_lambda",
    "pct_express_all",
    "pct_express_eligible",
    "pct_express_ineligible",
    "tt_express",
    "tt_general",
    "converged",
)


@dataclass(frozen=True)
class SocietalWeights:
    eligible: float = 1.0
    ineligible: float = 1.0
    revenue: float = 1.0

    def __post_init__(self):
        for name in ("eligible", "ineligible", "revenue"):
            object.__setattr__(self, name, check_nonnegative(getattr(self, name), f"weight {name}"))
        if self.eligible == self.ineligible == self.revenue == 0:
            raise ValueError("at least one societal weight must be positive")

    @classmethod
    def coerce(cls, value):
        return value if isinstance(value, cls) else cls(*value)

    def scaled(self, factor):
        return SocietalWeights(self.eligible * factor, self.ineligible * factor, self.revenue * factor)

    def as_tuple(self):
        return (self.eligible, self.ineligible, self.revenue)


def toll_revenue(result, groups, policy):
    """Out-of-pocket toll payments collected over the horizon."""
    tolls = policy.tolls.T[None]  # (1, T, E)
    if policy.kind == "cbcp":
        return float(np.sum(result.flows.pocket * tolls))
    elig = np.array([g.eligible for g in groups], dtype=float)[:, None, None]
    rate = tolls * (1.0 - elig * policy.discounts.T[None])
    return float(np.sum(result.flows.express * rate))


def societal_cost(result, groups, policy, weights):
    """Weighted eligible cost plus weighted ineligible cost minus weighted revenue."""
    if not result.converged:
        raise NotConvergedError("societal cost needs a converged equilibrium")
    w = SocietalWeights.coerce(weights)
    elig = np.array([g.eligible for g in groups])
    cost = result.per_group_cost
    return float(
        w.eligible * cost[elig].sum()
        + w.ineligible * cost[~elig].sum()
        - w.revenue * toll_revenue(result, groups, policy)
    )


def _express_pct(flows, mask):
    if not mask.any():
        return float("nan")
    express = flows.express[mask].sum()
    total = express + flows.general[mask].sum()
    return 100.0 * float(express / total) if total > 0 else float("nan")


def _mean_travel_time(net, aggregate, lane):
    x = aggregate[..., lane]
    volume = x.sum()
    if volume <= 0:
        return float("nan")
    lat = net.latencies.latency(aggregate)[..., lane]
    return float(np.sum(x * lat) / volume)


@dataclass(frozen=True, eq=False)
class GridRow:
    tau: float
    budget: float
    alpha: float
    f_lambda: tuple
    pct_express_all: float
    pct_express_eligible: float
    pct_express_ineligible: float
    tt_express: float
    tt_general: float
    converged: bool
    vi_gap: float
    total_cost: float
    result: object = field(default=None, repr=False)
    policy: object = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class GridSearchReport:
    kind: str
    weights: tuple
    rows: list
    best: tuple  # row index per weight vector, None if nothing converged

    def best_row(self, i=0):
        idx = self.best[i]
        return None if idx is None else self.rows[idx]

    def to_csv(self, handle=None, header_comment=None):
        """Write rows as CSV. One weight vector gives a ``f_lambda`` column; several give ``f_lambda_<i>``."""
        out = io.StringIO() if handle is None else handle
        if header_comment:
            out.write(f"# {header_comment}\n")
        if len(self.weights) == 1:
            header = list(GRID_COLUMNS)
        else:
            header = ["tau", "budget"] + [f"f_lambda_{i}" for i in range(len(self.weights))] + list(GRID_COLUMNS[3:])
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for r in self.rows:
            writer.writerow(
                [_fmt(r.tau), _fmt(r.budget)]
                + [_fmt(v) for v in r.f_lambda]
                + [_fmt(v) for v in (r.pct_express_all, r.pct_express_eligible, r.pct_express_ineligible,
                                     r.tt_express, r.tt_general)]
                + [int(r.converged)]
            )
        return out.getvalue() if handle is None else None


def _fmt(value):
    return repr(float(value))


def grid_alpha(tau, budget, horizon):
    """Discount matching a budget: ``B / (tau T)`` clamped to ``[0, 1]``; zero without a toll."""
    if tau == 0:
        return 0.0
    return float(min(1.0, max(0.0, budget / (tau * horizon))))


def _grid_point(base, net, groups, tau, budget, weights):
    horizon = max(g.horizon for g in groups)
    alpha = grid_alpha(tau, budget, horizon)
    if isinstance(base, CBCPEquilibrium):
        est = clone(base).set_params(tolls=tau, budget=budget)
    else:
        est = clone(base).set_params(tolls=tau, discounts=alpha)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        est.fit(net, groups)
    res, fitted_groups, policy = est.result_, est.groups_, est.policy_
    elig = np.array([g.eligible for g in fitted_groups])
    if res.converged:
        f = tuple(societal_cost(res, fitted_groups, policy, w) for w in weights)
    else:
        f = tuple(float("nan") for _ in weights)
    return GridRow(
        tau=float(tau),
        budget=float(budget),
        alpha=alpha,
        f_lambda=f,
        pct_express_all=_express_pct(res.flows, np.ones_like(elig)),
        pct_express_eligible=_express_pct(res.flows, elig),
        pct_express_ineligible=_express_pct(res.flows, ~elig),
        tt_express=_mean_travel_time(net, res.aggregate, EXPRESS),
        tt_general=_mean_travel_time(net, res.aggregate, GENERAL),
        converged=res.converged,
        vi_gap=res.vi_gap,
        total_cost=res.total_cost,
        result=res,
        policy=policy,
    )


def _argmin(values, ok, rel_tol=1e-12):
    candidates = [(v, i) for i, (v, good) in enumerate(zip(values, ok)) if good and np.isfinite(v)]
    if not candidates:
        return None
    low = min(v for v, _ in candidates)
    tol = rel_tol * max(1.0, abs(low))
    return next(i for v, i in candidates if v <= low + tol)


def pareto_grid_search(network, groups, toll_grid=None, budget_grid=None, weights=((1.0, 1.0, 1.0),),
                       kind="cbcp", options=None, n_jobs=None):
    """Solve the equilibrium at every ``(toll, budget)`` pair and rank by societal cost.

    ``weights`` is one weight vector or a sequence of them. Under a discount
    policy each budget maps to ``alpha = B / (tau T)``. Rows that fail to
    converge are kept, flagged, and excluded from the argmin.
    """
    if kind not in ("dbcp", "cbcp"):
        raise ValueError(f"kind must be 'dbcp' or 'cbcp', got {kind!r}")
    tolls = DEFAULT_TOLLS if toll_grid is None else np.asarray(toll_grid, dtype=float).ravel()
    budgets = DEFAULT_BUDGETS if budget_grid is None else np.asarray(budget_grid, dtype=float).ravel()
    if tolls.size == 0 or budgets.size == 0:
        raise ValueError("toll and budget grids must be nonempty")
    if np.any(tolls < 0) or np.any(budgets < 0):
        raise ValueError("toll and budget grids must be nonnegative")
    if isinstance(weights, SocietalWeights) or np.ndim(weights) == 1:
        weights = (weights,)
    weights = tuple(SocietalWeights.coerce(w) for w in weights)
    options = options or ANALYSIS_OPTIONS
    params = dict(max_iters=options.max_iters, gap_tol=options.gap_tol, line_search=options.line_search,
                  method=options.method, init=options.init, random_state=options.seed)
    base = CBCPEquilibrium(**params) if kind == "cbcp" else DBCPEquilibrium(**params)
    net = validate(network, total_demand=max(sum(g.demand for g in groups), 1e-12))
    groups = list(groups)
    points = [(float(t), float(b)) for t in tolls for b in budgets]
    rows = Parallel(n_jobs=n_jobs)(delayed(_grid_point)(base, net, groups, t, b, weights) for t, b in points)
    ok = [r.converged for r in rows]
    best = tuple(_argmin([r.f_lambda[i] for r in rows], ok) for i in range(len(weights)))
    return GridSearchReport(kind, weights, rows, best)


# ---------------------------------------------------------------------------
# sensitivity sweeps


@dataclass(frozen=True, eq=False)
class SensitivityCurves:
    alpha: np.ndarray
    yC: np.ndarray
    yD: np.ndarray
    label: str = ""
    value: float = float("nan")
    converged: bool = True
    vot_ineligible: np.ndarray = None

    def rows(self):
        return [(float(a), float(c), float(d)) for a, c, d in zip(self.alpha, self.yC, self.yD)]


def _eligible_average(est):
    return est.result_.eligible_express(est.groups_)


def _pair(net, groups, tau, alpha, horizon, params):
    credit = CBCPEquilibrium(tolls=tau, budget=alpha * tau * horizon, **params).fit(net, groups)
    discount = DBCPEquilibrium(tolls=tau, discounts=alpha, **params).fit(net, groups)
    demand = sum(g.demand for g in groups if g.eligible)
    return (_eligible_average(credit) / demand, _eligible_average(discount) / demand,
            credit.converged_ and discount.converged_)


def _solver_params(options):
    return dict(max_iters=options.max_iters, gap_tol=options.gap_tol, line_search=options.line_search,
                method=options.method, init=options.init, random_state=options.seed)


def draw_ineligible_vot(vbar, delta, horizon, seed):
    """``vbar + u * delta`` per time with ``u`` uniform on ``[-1, 1]`` from a Philox stream."""
    rng = np.random.Generator(np.random.Philox(seed))
    u = 2.0 * rng.random(horizon) - 1.0
    return vbar + u * delta


def sensitivity_vot(latency, toll, vot_e, vbar_i, delta_i, horizon=5, seed=0, alphas=None,
                    demand_ineligible=1.0, options=None, n_jobs=None):
    """Time-averaged eligible express flow under both policies with a perturbed ineligible VoT.

    The credit budget is ``alpha * toll * horizon``, free to be spent at any time.
    """
    check_positive(toll, "toll")
    check_nonnegative(delta_i, "delta_i")
    if int(horizon) < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    alphas = check_alpha_grid(np.linspace(0.0, 1.0, 21) if alphas is None else alphas)
    vot_i = draw_ineligible_vot(vbar_i, delta_i, int(horizon), seed)
    if np.any(vot_i <= 0):
        raise ValueError("perturbed ineligible VoT must stay positive")
    net = single_edge_network(latency)
    groups = [UserGroup("eligible", True, np.full(int(horizon), vot_e)),
              UserGroup("ineligible", False, vot_i, demand_ineligible)]
    params = _solver_params(options or ANALYSIS_OPTIONS)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        out = Parallel(n_jobs=n_jobs)(delayed(_pair)(net, groups, toll, float(a), int(horizon), params) for a in alphas)
    yc, yd, ok = zip(*out)
    return SensitivityCurves(alphas, np.array(yc), np.array(yd), "vI_bar", float(vbar_i), all(ok), vot_i)


def sensitivity_demand(latency, toll, vot_e, vot_i, demands=(0.0, 0.5, 1.0, 1.5), alphas=None,
                       options=None, n_jobs=None):
    """Eligible express flow under both policies for each ineligible demand level."""
    check_positive(toll, "toll")
    alphas = check_alpha_grid(np.linspace(0.0, 1.0, 21) if alphas is None else alphas)
    net = single_edge_network(latency)
    params = _solver_params(options or ANALYSIS_OPTIONS)
    jobs = []
    for d in demands:
        d = check_nonnegative(d, "ineligible demand")
        groups = [UserGroup("eligible", True, [vot_e]), UserGroup("ineligible", False, [vot_i], d)]
        jobs += [(d, float(a), groups) for a in alphas]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        out = Parallel(n_jobs=n_jobs)(delayed(_pair)(net, g, toll, a, 1, params) for _, a, g in jobs)
    curves = []
    for i, d in enumerate(demands):
        chunk = out[i * len(alphas):(i + 1) * len(alphas)]
        yc, yd, ok = zip(*chunk)
        curves.append(SensitivityCurves(alphas, np.array(yc), np.array(yd), "dI", float(d), all(ok)))
    return curves


def curves_csv(curves, handle, header_comment=None):
    """Write ``alpha,yC,yD[,<label>]`` rows for one or several curve sets."""
    if isinstance(curves, SensitivityCurves):
        curves = [curves]
    if header_comment:
        handle.write(f"# {header_comment}\n")
    label = curves[0].label
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["alpha", "yC", "yD"] + ([label] if label else []))
    for c in curves:
        for a, yc, yd in c.rows():
            writer.writerow([_fmt(a), _fmt(yc), _fmt(yd)] + ([_fmt(c.value)] if label else []))
