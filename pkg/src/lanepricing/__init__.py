"""Equilibrium analysis of discount- and credit-based express lane pricing."""

__version__ = "0.1.0"

from .analysis import (
    SocietalWeights,
    pareto_grid_search,
    sensitivity_demand,
    sensitivity_vot,
    societal_cost,
)
from .equilibrium import (
    CBCPEquilibrium,
    DBCPEquilibrium,
    EquilibriumResult,
    SolverOptions,
    linear_subproblem_cbcp_eligible,
    linear_subproblem_dbcp,
    solve_cbcp,
    solve_dbcp,
    vi_gap,
)
from .exceptions import *  # noqa: F401,F403
from .network import LatencyFn, Network, cheapest_route, load_network, single_edge_network, validate
from .policies import CbcpPolicy, DbcpPolicy, FlowPattern, UserGroup
from .singleedge import (
    SingleEdgeFlows,
    SingleEdgeScenario,
    alpha1,
    alpha2,
    alpha3,
    classify_regime,
    fixed_point_flow,
    kkt_residual,
    yC_case1,
    yC_case2,
    yD_case1,
    yD_case2,
)

__all__ = [
    "CBCPEquilibrium", "CbcpPolicy", "DBCPEquilibrium", "DbcpPolicy", "EquilibriumResult", "FlowPattern",
    "LatencyFn", "Network", "SingleEdgeFlows", "SingleEdgeScenario", "SocietalWeights", "SolverOptions",
    "UserGroup", "alpha1", "alpha2", "alpha3", "cheapest_route", "classify_regime", "fixed_point_flow",
    "kkt_residual", "linear_subproblem_cbcp_eligible", "linear_subproblem_dbcp", "load_network",
    "pareto_grid_search", "sensitivity_demand", "sensitivity_vot", "single_edge_network", "societal_cost",
    "solve_cbcp", "solve_dbcp", "validate", "vi_gap", "yC_case1", "yC_case2", "yD_case1", "yD_case2",
]
