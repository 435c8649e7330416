import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from lanepricing.equilibrium import (
    CBCPEquilibrium,
    DBCPEquilibrium,
    SolverOptions,
    check_feasible,
    convex_objective,
    linear_subproblem_cbcp_eligible,
    linear_subproblem_dbcp,
    solve_cbcp,
    solve_dbcp,
    vi_gap,
)
from lanepricing.exceptions import ConvergenceWarning, InfeasibleFlow, TimeVaryingEligibleVot
from lanepricing.network import EXPRESS, GENERAL, LatencyFn, single_edge_network
from lanepricing.policies import CbcpPolicy, DbcpPolicy, FlowPattern, UserGroup

from conftest import QUAD, TIGHT

NET = single_edge_network(QUAD)
OPTS = SolverOptions(gap_tol=TIGHT)


def elig(vot=1.0, T=1, demand=1.0):
    return UserGroup("E", True, np.full(T, vot), demand)


def inelig(vot=1.25, T=1, demand=1.0):
    return UserGroup("I", False, np.full(T, vot) if np.ndim(vot) == 0 else vot, demand)


class TestDbcpExamples:
    def test_no_discount(self):
        res = solve_dbcp(NET, [elig()], DbcpPolicy.uniform(0.2, 0.0), OPTS)
        assert res.converged
        assert res.flows.express[0, 0, 0] == pytest.approx(0.1, abs=1e-8)

    def test_full_discount_splits_evenly(self):
        res = solve_dbcp(NET, [elig()], DbcpPolicy.uniform(0.2, 1.0), OPTS)
        assert res.flows.express[0, 0, 0] == pytest.approx(0.5, abs=1e-8)

    def test_two_groups(self):
        res = solve_dbcp(NET, [elig(), inelig()], DbcpPolicy.uniform(0.4, 0.5), OPTS)
        assert res.flows.express[0, 0, 0] == pytest.approx(0.8, abs=1e-7)
        assert res.flows.express[1, 0, 0] == pytest.approx(0.0, abs=1e-7)


class TestCbcpExamples:
    def test_small_budget_mixes_payment(self):
        res = solve_cbcp(NET, [elig()], CbcpPolicy.uniform(0.2, 0.05 * 0.2), OPTS)
        assert res.flows.express[0, 0, 0] == pytest.approx(0.1, abs=1e-8)
        assert res.flows.credit[0, 0, 0] == pytest.approx(0.05, abs=1e-8)
        assert res.flows.pocket[0, 0, 0] == pytest.approx(0.05, abs=1e-8)

    def test_mid_budget_all_credit(self):
        res = solve_cbcp(NET, [elig()], CbcpPolicy.uniform(0.2, 0.3 * 0.2), OPTS)
        assert res.flows.express[0, 0, 0] == pytest.approx(0.3, abs=1e-8)
        assert res.flows.pocket[0, 0, 0] == pytest.approx(0.0, abs=1e-8)
        assert res.budget_spent[0] <= 0.06 + 1e-9

    def test_zero_budget_is_plain_toll(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        c = solve_cbcp(triangle, [g for g in two_groups_t2], CbcpPolicy(tolls, 0.0), OPTS)
        d = solve_dbcp(triangle, two_groups_t2, DbcpPolicy(tolls, 0.0), OPTS)
        assert np.allclose(c.aggregate, d.aggregate, atol=1e-6)
        assert np.all(c.flows.credit == 0)

    def test_time_varying_eligible_vot_rejected(self):
        with pytest.raises(TimeVaryingEligibleVot):
            solve_cbcp(NET, [UserGroup("E", True, [1.0, 2.0])], CbcpPolicy.uniform(0.2, 0.1, horizon=2))


class TestViGap:
    def test_all_general_when_express_cheaper(self):
        flows = FlowPattern("dbcp", [[[0.0]]], [[[1.0]]])
        # express costs l(0) + 0.1 = 0.1, general costs l(1) = 0.25
        assert vi_gap(flows, NET, [elig()], DbcpPolicy.uniform(0.1, 0.0)) == pytest.approx(0.15, abs=1e-15)

    def test_gap_scales_with_demand_and_vot(self):
        flows = FlowPattern("dbcp", [[[0.0]]], [[[2.0]]])
        g = UserGroup("E", True, [3.0], 2.0)
        # express 3*l(0) + 0.1, general 3*l(2) = 3
        assert vi_gap(flows, NET, [g], DbcpPolicy.uniform(0.1, 0.0)) == pytest.approx(2.0 * (3.0 - 0.1))

    def test_symmetric_equilibrium_has_zero_gap(self):
        flows = FlowPattern("dbcp", [[[0.5]]], [[[0.5]]])
        assert vi_gap(flows, NET, [elig()], DbcpPolicy.uniform(0.2, 1.0)) <= 1e-12

    def test_infeasible_flow_rejected(self):
        with pytest.raises(InfeasibleFlow):
            vi_gap(FlowPattern("dbcp", [[[0.5]]], [[[0.4]]]), NET, [elig()], DbcpPolicy.uniform(0.2, 0.0))
        with pytest.raises(InfeasibleFlow):
            check_feasible(FlowPattern("cbcp", [[[0.5]]], [[[0.5]]], [[[0.5]]]), NET, [elig()],
                           CbcpPolicy.uniform(0.2, 0.01))

    def test_converged_gap_contract(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        res = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25))
        assert res.converged
        assert res.vi_gap <= 1e-6 * (1 + abs(res.total_cost))


class TestLinearSubproblems:
    def test_dbcp_delegates_to_cheapest_route(self):
        g = UserGroup("g", True, [2.0], 1.5)
        assert linear_subproblem_dbcp(NET, g, 0, [[1.2, 1.0]]).tolist() == [[0.0, 1.5]]
        assert linear_subproblem_dbcp(NET, g, 0, [[1.0, 1.0]]).tolist() == [[1.5, 0.0]]

    def test_budget_within_reach_buys_all_credit(self):
        costs = np.array([[[0.1, 0.5, 0.45]]])
        atom = linear_subproblem_cbcp_eligible(NET, costs, [[0.4]], budget=0.5)
        assert atom[0, 0].tolist() == [1.0, 0.0, 0.0]

    def test_zero_budget_is_ineligible_choice(self):
        costs = np.array([[[0.1, 0.5, 0.45]], [[0.1, 0.3, 0.45]]])
        atom = linear_subproblem_cbcp_eligible(NET, costs, [[0.4, 0.2]], budget=0.0)
        assert atom[:, 0].tolist() == [[0, 0, 1], [0, 1, 0]]

    def test_identical_times_spend_budget_in_time_order(self):
        costs = np.array([[[0.1, 0.5, 0.4]], [[0.1, 0.5, 0.4]]])
        atom = linear_subproblem_cbcp_eligible(NET, costs, [[0.4, 0.4]], budget=0.4 * 0.5)
        assert np.sum(atom[..., 0] * 0.4) == pytest.approx(0.2, abs=1e-15)
        assert atom[0, 0, 0] == pytest.approx(0.5) and atom[1, 0, 0] == 0.0
        assert np.sum(costs * atom) == pytest.approx(_grid_lp(costs[:, 0], 0.4, 0.2), abs=1e-12)

    @given(st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6), st.floats(0.05, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_matches_grid_enumeration(self, flat, tau):
        base = np.array(flat).reshape(2, 3)
        costs = base.copy()
        costs[:, 1] = costs[:, 0] + tau  # pocket costs the toll on top of credit
        budget = tau * 0.5
        atom = linear_subproblem_cbcp_eligible(NET, costs[:, None, :], [[tau, tau]], budget)
        assert np.sum(atom[..., 0]) * tau <= budget + 1e-12
        assert np.allclose(atom.sum(axis=-1), 1.0)
        assert np.sum(costs[:, None, :] * atom) == pytest.approx(_grid_lp(costs, tau, budget), abs=1e-12)


def _grid_lp(costs, tau, budget):
    """Brute force over {0, 1/2, 1} splits of (credit, pocket, general) at each of two times."""
    splits = [(c, p, 1.0 - c - p) for c in (0, 0.5, 1) for p in (0, 0.5, 1) if c + p <= 1]
    best = np.inf
    for s0, s1 in itertools.product(splits, repeat=2):
        if (s0[0] + s1[0]) * tau > budget + 1e-12:
            continue
        best = min(best, float(np.dot(costs[0], s0) + np.dot(costs[1], s1)))
    return best


class TestSolverProperties:
    def test_aggregate_unique_across_random_starts(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        for policy in (DbcpPolicy(tolls, 0.4), CbcpPolicy(tolls, 0.25)):
            runs = [solve_cbcp if policy.kind == "cbcp" else solve_dbcp for _ in range(5)]
            aggs = [run(triangle, two_groups_t2, policy, SolverOptions(gap_tol=1e-9, init="random", seed=s)).aggregate
                    for s, run in enumerate(runs)]
            for a in aggs[1:]:
                assert np.max(np.abs(a - aggs[0])) <= 1e-5

    def test_dbcp_times_decouple(self, triangle):
        T = 3
        rng = np.random.default_rng(7)
        tolls = rng.uniform(0, 0.6, (3, T))
        disc = rng.uniform(0, 1, (3, T))
        groups = [UserGroup("E", True, rng.uniform(0.5, 1.5, T)), UserGroup("I", False, rng.uniform(1, 2, T), 0.7)]
        opts = SolverOptions(gap_tol=1e-10)
        joint = solve_dbcp(triangle, groups, DbcpPolicy(tolls, disc), opts)
        assert joint.converged
        for t in range(T):
            single = solve_dbcp(triangle, [UserGroup(g.id, g.eligible, g.vot[t:t + 1], g.demand) for g in groups],
                                DbcpPolicy(tolls[:, t:t + 1], disc[:, t:t + 1]), opts)
            assert np.max(np.abs(joint.aggregate[t] - single.aggregate[0])) <= 1e-8

    @pytest.mark.parametrize("method", ["pairwise", "classic"])
    @pytest.mark.filterwarnings("ignore::lanepricing.exceptions.ConvergenceWarning")
    def test_objective_non_increasing(self, triangle, two_groups_t2, method):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        res = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25),
                         SolverOptions(gap_tol=1e-8, method=method, max_iters=3000))
        hist = np.array(res.objective_history)
        assert np.all(np.diff(hist) <= 1e-12 * (1 + np.abs(hist[:-1])))

    def test_gap_bounds_suboptimality(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        res = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25), OPTS)
        final = res.objective
        for obj, gap in zip(res.objective_history, res.gap_history):
            assert obj - final <= gap + 1e-10

    def test_outputs_are_feasible(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        for budget in (0.0, 0.05, 0.25, 5.0):
            res = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, budget))
            assert res.flows.conservation_residual(triangle, two_groups_t2) <= 1e-9
            assert np.all(res.budget_spent <= budget + 1e-9)
            assert min(res.flows.credit.min(), res.flows.pocket.min(), res.flows.general.min()) >= -1e-12

    def test_not_converged_is_flagged(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        with pytest.warns(ConvergenceWarning):
            res = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25), SolverOptions(max_iters=1, gap_tol=1e-12))
        assert not res.converged
        assert res.flows.conservation_residual(triangle, two_groups_t2) <= 1e-9

    def test_harmonic_steps_make_progress(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = solve_dbcp(NET, [elig()], DbcpPolicy.uniform(0.2, 0.0),
                             SolverOptions(method="classic", line_search="harmonic", max_iters=2000, gap_tol=1e-4))
        assert res.flows.express[0, 0, 0] == pytest.approx(0.1, abs=1e-2)

    def test_deterministic(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        opts = SolverOptions(init="random", seed=3)
        a = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25), opts)
        b = solve_cbcp(triangle, two_groups_t2, CbcpPolicy(tolls, 0.25), opts)
        assert np.array_equal(a.flows.express, b.flows.express)

    @pytest.mark.parametrize("kwargs", [dict(gap_tol=0.0), dict(max_iters=0), dict(line_search="armijo"),
                                        dict(line_search="harmonic")])
    def test_bad_options(self, kwargs):
        with pytest.raises(ValueError):
            SolverOptions(**kwargs)


def _integral(b, p, x):
    return b * x ** (p + 1) / (p + 1)


class TestBruteForceObjective:
    """Minimise the convex program on a 1e-3 grid of each group's express flow."""

    grid = np.linspace(0.0, 1.0, 1001)

    @pytest.mark.parametrize("tau,alpha,vi", [(0.4, 0.5, 1.25), (0.3, 0.0, 2.0), (0.6, 0.9, 1.1)])
    def test_dbcp_two_groups(self, tau, alpha, vi):
        b, p = 0.25, 2
        ye, yi = np.meshgrid(self.grid, self.grid, indexing="ij")
        x1 = ye + yi
        obj = _integral(b, p, x1) + _integral(b, p, 2.0 - x1) + ye * (1 - alpha) * tau + yi * tau / vi
        brute = float(obj.min())
        res = solve_dbcp(NET, [elig(), inelig(vi)], DbcpPolicy.uniform(tau, alpha), OPTS)
        assert res.objective <= brute + 1e-12
        assert brute - res.objective <= 1e-5

    # budget / tau sits on the grid: the pocket term has a kink there and the
    # equilibrium can rest on it, which an off-grid kink would blur to ~h*tau
    @pytest.mark.parametrize("tau,budget,vi", [(0.4, 0.2, 1.25), (0.3, 0.021, 2.0), (0.5, 0.0, 1.5)])
    def test_cbcp_two_groups(self, tau, budget, vi):
        b, p = 1.0 / 16.0, 4
        ye, yi = np.meshgrid(self.grid, self.grid, indexing="ij")
        x1 = ye + yi
        # credit is free in the program, so the eligible group uses it first
        pocket = np.maximum(ye - budget / tau, 0.0)
        obj = _integral(b, p, x1) + _integral(b, p, 2.0 - x1) + pocket * tau + yi * tau / vi
        brute = float(obj.min())
        res = solve_cbcp(single_edge_network(LatencyFn.monomial(b, p)), [elig(), inelig(vi)],
                         CbcpPolicy.uniform(tau, budget), OPTS)
        assert res.objective <= brute + 1e-12
        assert brute - res.objective <= 1e-5


class TestEstimators:
    def test_fit_and_params(self):
        est = CBCPEquilibrium(tolls=0.2, budget=0.06, gap_tol=1e-10).fit(NET, [elig()])
        assert est.converged_ and est.eligible_express_share() == pytest.approx(0.3, abs=1e-8)
        params = est.get_params()
        assert params["budget"] == 0.06 and params["gap_tol"] == 1e-10
        twin = clone(est).set_params(budget=0.0)
        assert not hasattr(twin, "result_")
        assert twin.fit(NET, [elig()]).eligible_express_share() == pytest.approx(0.1, abs=1e-7)

    def test_dbcp_estimator(self):
        est = DBCPEquilibrium(tolls=0.4, discounts=0.5, gap_tol=1e-10).fit(NET, [elig(), inelig()])
        assert est.flows_.express[0, 0, 0] == pytest.approx(0.8, abs=1e-7)
        assert est.n_iter_ >= 0 and est.vi_gap_ <= 1e-9

    def test_objective_helper_matches_result(self, triangle, two_groups_t2):
        tolls = np.array([[0.3, 0.5], [0.2, 0.1], [0.4, 0.0]])
        pol = DbcpPolicy(tolls, 0.3)
        res = solve_dbcp(triangle, two_groups_t2, pol)
        assert convex_objective(res.flows, triangle, two_groups_t2, pol) == res.objective


class TestTiedGroups:
    def test_tied_toll_rates_give_express_to_ineligible(self):
        # (1 - 0.2) * 0.4 / 1 equals 0.4 / 1.25: both groups see the same paid rate
        res = solve_dbcp(NET, [elig(), inelig()], DbcpPolicy.uniform(0.4, 0.2), OPTS)
        assert res.flows.express[0, 0, 0] == 0.0
        assert res.vi_gap <= 1e-10
        untied = solve_dbcp(NET, [elig(), inelig()], DbcpPolicy.uniform(0.4, 0.2 + 1e-9), OPTS)
        assert np.allclose(res.aggregate, untied.aggregate, atol=1e-6)

    def test_untied_groups_untouched(self):
        res = solve_dbcp(NET, [elig(), inelig()], DbcpPolicy.uniform(0.4, 0.5), OPTS)
        assert res.flows.express[0, 0, 0] == pytest.approx(0.8, abs=1e-7)
