"""Single-edge theory: thresholds, equilibrium express flows and regimes.

One edge carries an express and a general lane with a shared latency ``l``.
The eligible group has demand 1 and VoT ``v_e``. In case 1 it is alone; in
case 2 an ineligible group of demand 1 and VoT ``v_i > v_e`` joins it. All
roots are found by bisection carried to machine precision, so they serve as
ground truth for the general solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    AssumptionViolated,
    AssumptionWarning,
    NoInteriorCrossing,
    NotBracketed,
    UnknownCase,
)
from .network import LatencyFn, single_edge_network
from .policies import UserGroup

_MAX_BISECTIONS = 200
BOUNDARY_TOL = 1e-12


def _bisect(f, lo, hi):
    """Root of an increasing ``f`` with ``f(lo) < 0 <= f(hi)``."""
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= 1e-16:
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _check_shape(latency):
    if not isinstance(latency, LatencyFn):
        raise TypeError("latency must be a LatencyFn")
    if not latency.third_deriv_positive:
        warnings.warn(
            f"latency {latency.to_spec()} has no positive third derivative; "
            "threshold uniqueness is not guaranteed in general",
            AssumptionWarning,
            stacklevel=3,
        )


def _check_case1(latency, toll, vot_e):
    _check_shape(latency)
    if toll <= 0 or vot_e <= 0:
        raise AssumptionViolated("toll and eligible VoT must be positive")
    bound = vot_e * (latency(1.0) - latency(0.0))
    if toll >= bound:
        raise AssumptionViolated(f"toll {toll} must be below v_e*(l(1)-l(0)) = {bound:.6g}")


def _check_case2(latency, toll, vot_e, vot_i=None):
    _check_shape(latency)
    if toll <= 0 or vot_e <= 0:
        raise AssumptionViolated("toll and eligible VoT must be positive")
    if vot_i is not None and vot_i <= vot_e:
        raise AssumptionViolated(f"ineligible VoT {vot_i} must exceed eligible VoT {vot_e}")
    bound = vot_e * (latency(2.0) - latency(0.0))
    if toll >= bound:
        raise AssumptionViolated(f"toll {toll} must be below v_e*(l(2)-l(0)) = {bound:.6g}")


@dataclass(frozen=True)
class SingleEdgeScenario:
    """Shared latency, toll and the two populations; eligible demand is 1."""

    latency: LatencyFn
    toll: float
    vot_eligible: float
    vot_ineligible: float | None = None
    demand_ineligible: float | None = None

    def __post_init__(self):
        if self.vot_ineligible is not None and self.demand_ineligible is None:
            object.__setattr__(self, "demand_ineligible", 1.0)

    @property
    def case(self):
        if self.vot_ineligible is None or self.demand_ineligible == 0:
            return 1
        if self.demand_ineligible == 1:
            return 2
        raise UnknownCase(f"ineligible demand {self.demand_ineligible} is neither 0 nor 1")

    def check(self):
        if self.case == 1:
            _check_case1(self.latency, self.toll, self.vot_eligible)
        else:
            _check_case2(self.latency, self.toll, self.vot_eligible, self.vot_ineligible)
        return self

    def network(self):
        return single_edge_network(self.latency)

    def groups(self):
        out = [UserGroup("eligible", True, [self.vot_eligible], 1.0)]
        if self.vot_ineligible is not None and self.demand_ineligible:
            out.append(UserGroup("ineligible", False, [self.vot_ineligible], self.demand_ineligible))
        return out


@dataclass(frozen=True, eq=False)
class SingleEdgeFlows:
    """Candidate single-edge flows, one entry per time step.

    Scalars are read as a one-step horizon. Ineligible entries stay zero in
    case 1.
    """

    express_eligible: np.ndarray
    general_eligible: np.ndarray
    credit_eligible: np.ndarray = 0.0
    express_ineligible: np.ndarray = 0.0
    general_ineligible: np.ndarray = 0.0

    def __post_init__(self):
        horizon = np.atleast_1d(np.asarray(self.express_eligible, dtype=float)).shape[0]
        for name in ("express_eligible", "general_eligible", "credit_eligible",
                     "express_ineligible", "general_ineligible"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape == (1,) and horizon > 1:
                arr = np.full(horizon, arr[0])
            if arr.shape != (horizon,):
                raise ValueError(f"{name} must have one entry per time step")
            object.__setattr__(self, name, arr)

    @property
    def horizon(self):
        return self.express_eligible.shape[0]

    @classmethod
    def from_result(cls, result):
        f = result.flows
        ineligible = f.shape[0] > 1
        zeros = np.zeros(f.shape[1])
        return cls(
            f.express[0, :, 0],
            f.general[0, :, 0],
            f.credit[0, :, 0],
            f.express[1, :, 0] if ineligible else zeros,
            f.general[1, :, 0] if ineligible else zeros,
        )


# ---------------------------------------------------------------------------
# thresholds and curves


def fixed_point_flow(latency, vot_e, toll, alpha, demand):
    """Express flow ``y`` with ``v_e l(y) + (1 - alpha) toll = v_e l(demand - y)``."""
    if demand not in (1, 2):
        raise ValueError(f"demand must be 1 or 2, got {demand}")
    paid = (1.0 - alpha) * toll

    def f(y):
        return vot_e * latency(y) + paid - vot_e * latency(demand - y)

    if f(0.0) >= 0:
        raise NotBracketed(
            f"v_e l(0) + (1-alpha) toll = {f(0.0) + vot_e * latency(demand):.6g} "
            f"is not below v_e l({demand}) = {vot_e * latency(demand):.6g}"
        )
    return _bisect(f, 0.0, demand / 2.0)


def fixed_point_slope(latency, vot_e, toll, alpha, demand):
    """Closed-form derivative of :func:`fixed_point_flow` with respect to ``alpha``."""
    y = fixed_point_flow(latency, vot_e, toll, alpha, demand)
    return toll / (vot_e * (latency.derivative(demand - y) + latency.derivative(y)))


def alpha1(latency, toll, vot_e):
    """Budget share below which eligible users also pay out of pocket (case 1)."""
    _check_case1(latency, toll, vot_e)
    rate = toll / vot_e
    return _bisect(lambda a: latency(a) + rate - latency(1.0 - a), 0.0, 0.5)


def alpha2(latency, toll, vot_e):
    """Discount share where the credit and discount express flows cross (case 1)."""
    lo = alpha1(latency, toll, vot_e)
    rate = toll / vot_e
    root = _bisect(lambda a: latency(a) + (1.0 - a) * rate - latency(1.0 - a), lo, 0.5)
    if not lo < root < 0.5:
        raise AssumptionViolated(f"crossing {root} outside ({lo}, 0.5)")
    return root


def alpha3(latency, toll, vot_e):
    """Interior share where the case-2 discount flow meets ``y = alpha``.

    Solves ``l(a) + (1 - a) toll / v_e = l(2 - a)``. That equation always holds
    at ``a = 1``, so the bisection runs on the quotient by ``1 - a``, whose
    value at 1 is ``toll / v_e - 2 l'(1)``.
    """
    _check_case2(latency, toll, vot_e)
    rate = toll / vot_e
    if rate <= 2.0 * latency.derivative(1.0):
        raise NoInteriorCrossing(
            f"toll {toll} is not above 2 v_e l'(1) = {2.0 * vot_e * latency.derivative(1.0):.6g}"
        )

    def h(a):
        return (latency(a) + (1.0 - a) * rate - latency(2.0 - a)) / (1.0 - a)

    return _bisect(h, 0.0, 1.0)


def yC_case1(alpha, latency, toll, vot_e):
    """``(total, credit, pocket)`` express flow under a credit budget ``alpha * toll``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a1 = alpha1(latency, toll, vot_e)
    if alpha < a1:
        return a1, alpha, a1 - alpha
    if alpha <= 0.5:
        return alpha, alpha, 0.0
    return 0.5, 0.5, 0.0


def yD_case1(alpha, latency, toll, vot_e):
    _check_case1(latency, toll, vot_e)
    return fixed_point_flow(latency, vot_e, toll, alpha, 1)


def yC_case2(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def yD_case2(alpha, latency, toll, vot_e, vot_i):
    """Eligible express flow under a discount when an ineligible group is present.

    Zero up to and including ``alpha = 1 - v_e / v_i``; the fixed point with
    total demand 2 above it.
    """
    _check_case2(latency, toll, vot_e, vot_i)
    if alpha <= 1.0 - vot_e / vot_i + BOUNDARY_TOL:
        return 0.0
    return fixed_point_flow(latency, vot_e, toll, alpha, 2)


def curves(latency, toll, vot_e, vot_i=None, alphas=None):
    """Columns ``alpha, yC, yD, yC_credit, yC_pocket`` over an alpha grid."""
    alphas = np.linspace(0.0, 1.0, 101) if alphas is None else np.asarray(alphas, dtype=float)
    rows = []
    for a in alphas:
        a = float(a)
        if vot_i is None:
            total, credit, pocket = yC_case1(a, latency, toll, vot_e)
            yd = yD_case1(a, latency, toll, vot_e)
        else:
            total = credit = yC_case2(a)
            pocket = 0.0
            yd = yD_case2(a, latency, toll, vot_e, vot_i)
        rows.append((a, total, yd, credit, pocket))
    arr = np.array(rows)
    return {name: arr[:, i] for i, name in enumerate(("alpha", "yC", "yD", "yC_credit", "yC_pocket"))}


# ---------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class RegimeReport:
    """Which policy yields more eligible express flow on each alpha interval.

    ``intervals`` is a list of ``((lo, hi), larger)`` with ``larger`` either
    ``"yC"`` or ``"yD"``; the intervals partition ``(0, 1)``.
    """

    regime: str
    thresholds: dict
    intervals: list

    def larger_at(self, alpha):
        """The larger curve at ``alpha``; ``None`` on a threshold (within ``BOUNDARY_TOL``)."""
        for (lo, hi), which in self.intervals:
            if lo + BOUNDARY_TOL < alpha < hi - BOUNDARY_TOL:
                return which
        return None

    def to_dict(self):
        return {
            "regime": self.regime,
            "thresholds": self.thresholds,
            "intervals": [{"lo": lo, "hi": hi, "larger": w} for (lo, hi), w in self.intervals],
        }


def classify_regime(latency, toll, vot_e, vot_i):
    _check_case2(latency, toll, vot_e, vot_i)
    ratio = 1.0 - vot_e / vot_i
    if toll <= 2.0 * vot_e * latency.derivative(1.0):
        return RegimeReport("LowToll", {"ratio": ratio}, [((0.0, ratio), "yC"), ((ratio, 1.0), "yD")])
    a3 = alpha3(latency, toll, vot_e)
    thresholds = {"ratio": ratio, "alpha3": a3}
    if ratio < a3:
        intervals = [((0.0, ratio), "yC"), ((ratio, a3), "yD"), ((a3, 1.0), "yC")]
        return RegimeReport("HighTollHighRatio", thresholds, intervals)
    return RegimeReport("HighTollLowRatio", thresholds, [((0.0, 1.0), "yC")])


def compare_case1(latency, toll, vot_e):
    """Case-1 counterpart of :func:`classify_regime`: discount dominates below ``alpha2``."""
    a1 = alpha1(latency, toll, vot_e)
    a2 = alpha2(latency, toll, vot_e)
    return RegimeReport("Case1", {"alpha1": a1, "alpha2": a2}, [((0.0, a2), "yD"), ((a2, 1.0), "yC")])


# ---------------------------------------------------------------------------
# optimality conditions


def kkt_residual(scenario: SingleEdgeScenario, flows: SingleEdgeFlows, kind, alpha):
    """Largest violation of the single-edge optimality conditions, in time units.

    Multipliers are reconstructed from the candidate: the demand multiplier at
    each time is the cheapest option cost there, and the budget multiplier is
    the credit saving over the next-best option where the most credit is used
    when the budget ``alpha * toll * horizon`` binds (zero otherwise). The
    residual covers complementary slackness products, sign constraints,
    demand conservation and the budget.
    """
    case = scenario.case
    if kind not in ("dbcp", "cbcp"):
        raise ValueError(f"kind must be 'dbcp' or 'cbcp', got {kind!r}")
    ell, tau = scenario.latency, scenario.toll
    v_e = scenario.vot_eligible
    f = flows
    x1 = f.express_eligible + f.express_ineligible
    x2 = f.general_eligible + f.general_ineligible
    l1 = np.array([ell(max(v, 0.0)) for v in x1])
    l2 = np.array([ell(max(v, 0.0)) for v in x2])
    parts = [
        np.max(-f.express_eligible),
        np.max(-f.general_eligible),
        np.max(np.abs(f.express_eligible + f.general_eligible - 1.0)),
        0.0,
    ]

    def slackness(options):
        lam = np.min(np.stack([c for _, c in options]), axis=0)
        return [float(np.max(np.abs(q * (c - lam)))) for q, c in options]

    if kind == "dbcp":
        parts.append(np.max(np.abs(f.credit_eligible)))
        parts += slackness([(f.express_eligible, l1 + (1.0 - alpha) * tau / v_e), (f.general_eligible, l2)])
    else:
        credit = f.credit_eligible
        pocket = f.express_eligible - credit
        allowance = alpha * f.horizon
        used = float(credit.sum())
        parts += [np.max(-credit), np.max(-pocket), used - allowance]
        paid = l1 + tau / v_e
        mu = 0.0
        if used >= allowance - 1e-12:
            t = int(np.argmax(credit))
            mu = max(0.0, min(paid[t], l2[t]) - l1[t])
        parts.append(abs(mu * (allowance - used)))
        parts += slackness([(credit, l1 + mu), (pocket, paid), (f.general_eligible, l2)])
    if case == 2:
        v_i = scenario.vot_ineligible
        parts += [
            np.max(-f.express_ineligible),
            np.max(-f.general_ineligible),
            np.max(np.abs(f.express_ineligible + f.general_ineligible - scenario.demand_ineligible)),
        ]
        parts += slackness([(f.express_ineligible, l1 + tau / v_i), (f.general_ineligible, l2)])
    else:
        parts += [np.max(np.abs(f.express_ineligible)), np.max(np.abs(f.general_ineligible))]
    return float(max(parts))


def oracle_flows(scenario: SingleEdgeScenario, kind, alpha):
    """Closed-form equilibrium flows for one scenario, as :class:`SingleEdgeFlows`."""
    ell, tau, v_e = scenario.latency, scenario.toll, scenario.vot_eligible
    if scenario.case == 1:
        if kind == "cbcp":
            total, credit, _ = yC_case1(alpha, ell, tau, v_e)
            return SingleEdgeFlows(total, 1.0 - total, credit)
        y = yD_case1(alpha, ell, tau, v_e)
        return SingleEdgeFlows(y, 1.0 - y)
    v_i = scenario.vot_ineligible
    if kind == "cbcp":
        # eligible users ride the express lane on credit only; the ineligible
        # group meets the remaining express capacity at its own toll cost
        y = yC_case2(alpha)
        z = _ineligible_express(ell, tau / v_i, y)
        return SingleEdgeFlows(y, 1.0 - y, y, z, 1.0 - z)
    y = yD_case2(alpha, ell, tau, v_e, v_i)
    z = _ineligible_express(ell, tau / v_i, y) if y == 0.0 else 0.0
    return SingleEdgeFlows(y, 1.0 - y, 0.0, z, 1.0 - z)


def _ineligible_express(latency, rate, eligible_express):
    """Ineligible express flow ``z`` with ``l(y + z) + rate = l(2 - y - z)``, clipped to ``[0, 1]``."""
    y = eligible_express

    def f(z):
        return latency(y + z) + rate - latency(2.0 - y - z)

    if f(0.0) >= 0:
        return 0.0
    if f(1.0) <= 0:
        return 1.0
    return _bisect(f, 0.0, 1.0)
