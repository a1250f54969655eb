import numpy as np
import pytest

from gridswitch.network import Bus, build_network
from gridswitch.solver import ClosedLoop, Disturbance
from gridswitch.supply import PILag, StaticDamping


def make_loop(inertias, lines, supplies, base_loads=None, loads=None, disturbances=()):
    """Closed loop from plain lists; lines are (from, to, B) with 1-based bus ids."""
    n = len(inertias)
    base_loads = [0.0] * n if base_loads is None else base_loads
    loads = [None] * n if loads is None else loads
    buses = [Bus(j + 1, inertias[j], base_loads[j], supplies[j], loads[j]) for j in range(n)]
    net = build_network({
        "buses": buses,
        "lines": [{"from": a, "to": b, "susceptance": B} for a, b, B in lines],
    })
    return ClosedLoop(net, tuple(Disturbance(*d) for d in disturbances))


@pytest.fixture
def two_bus_loop():
    return make_loop(
        [4.0, 3.0],
        [(1, 2, 5.0)],
        [PILag(K=0.5, D=1.0, tau_beta=0.5, K_tilde=0.2), StaticDamping(1.0)],
        base_loads=[0.1, -0.05],
        disturbances=[(2, 1.0, 0.2)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
