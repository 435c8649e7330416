import numpy as np
import pytest

from lanepricing.network import LatencyFn, Network, single_edge_network
from lanepricing.policies import UserGroup

QUAD = LatencyFn.monomial(0.25, 2)  # x^2 / 4
QUARTIC = LatencyFn.monomial(1.0 / 16.0, 4)  # x^4 / 16
QUARTIC_UNIT = LatencyFn.monomial(1.0, 4)  # x^4

TIGHT = 1e-11


def lane(form="monomial", **kw):
    return {"form": form, **kw}


def network_dict(edges, nodes, origin="o", destination="d"):
    return {"nodes": nodes, "origin": origin, "destination": destination, "edges": edges}


def edge(eid, tail, head, express=None, general=None):
    express = express or lane(b=1.0, p=2)
    return {"id": eid, "tail": tail, "head": head, "express": express, "general": general or express}


@pytest.fixture
def quad_edge():
    return single_edge_network(QUAD)


@pytest.fixture
def triangle():
    """o->a->d in series plus a direct o->d edge; lanes differ per edge."""
    return Network.from_dict(network_dict([
        edge("oa", "o", "a", lane("bpr", a=1, b=0.5, c=1, p=4), lane("bpr", a=1, b=1, c=1, p=4)),
        edge("ad", "a", "d", lane(b=1, p=2), lane(b=2, p=2)),
        edge("od", "o", "d", lane("bpr", a=2, b=0.3, c=1, p=4), lane("bpr", a=2, b=0.6, c=1, p=4)),
    ], ["o", "a", "d"]))


@pytest.fixture
def two_groups_t2():
    return [UserGroup("E", True, [1.0, 1.0], 1.0), UserGroup("I", False, [1.3, 1.8], 1.5)]


def eligible(vot=1.0, horizon=1, demand=1.0):
    return UserGroup("eligible", True, np.full(horizon, vot), demand)


def ineligible(vot=1.25, horizon=1, demand=1.0):
    return UserGroup("ineligible", False, np.full(horizon, vot) if np.ndim(vot) == 0 else vot, demand)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
