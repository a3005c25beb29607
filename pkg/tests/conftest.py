import logging

import pytest

from cellgrid.experiment import LINE_MODS, builtin_path
from cellgrid.netfile import parse_network
from cellgrid.netmodel import (Branch, Bus, Generator, Load, Network,
                               modify_line_length, to_per_unit)

# the attenuation range report is expected on the bundled benchmark; keep it
# out of the test output
logging.getLogger("cellgrid.clustering").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def benchmark_path():
    return builtin_path("cigre_mv_14.net")


@pytest.fixture(scope="session")
def benchmark(benchmark_path):
    return parse_network(benchmark_path)


@pytest.fixture(scope="session")
def benchmark_pun(benchmark):
    return to_per_unit(benchmark)


@pytest.fixture(scope="session")
def modified_benchmark(benchmark):
    net = benchmark
    for line_id, km in LINE_MODS:
        net = modify_line_length(net, line_id, km)
    return net


def make_two_bus(p_mw=5.0, q_mvar=1.0, v_slack=1.0):
    """Slack + PQ load over z = 0.01 + j0.1 pu (20 kV, 10 MVA base)."""
    return Network(
        buses=(Bus("s", "slack", 20.0, v_slack), Bus("b", "pq", 20.0)),
        branches=(Branch("l1", "s", "b", 0.4, 4.0, 0.0, 1.0),),
        loads=(Load("ld", "b", p_mw, q_mvar),),
        generators=(),
        base_mva=10.0)


@pytest.fixture
def two_bus():
    return make_two_bus()


def make_two_island():
    """One slack plus a disconnected PQ pair; only the Jacobian looks at it."""
    return Network(
        buses=(Bus("s", "slack", 20.0, 1.0), Bus("a", "pq", 20.0),
               Bus("b", "pq", 20.0), Bus("c", "pq", 20.0)),
        branches=(Branch("l1", "s", "a", 0.4, 4.0, 0.0, 1.0),
                  Branch("l2", "b", "c", 0.4, 4.0, 0.0, 1.0)),
        loads=(Load("ld", "a", 1.0, 0.2),),
        generators=(),
        base_mva=10.0)
