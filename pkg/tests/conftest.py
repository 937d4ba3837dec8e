import numpy as np
import pytest

from pinmg.control import ControlGains
from pinmg.cybergraph import CommGraph, ring_lattice
from pinmg.dynamics import extract_steady_state
from pinmg.netmodel import packaged_network
from pinmg.powerflow import solve_power_flow


@pytest.fixture(scope="session")
def net4():
    return packaged_network("bus4")


@pytest.fixture(scope="session")
def net38():
    return packaged_network("bus38")


@pytest.fixture(scope="session")
def pf4(net4):
    return solve_power_flow(net4)


@pytest.fixture(scope="session")
def pf38(net38):
    return solve_power_flow(net38)


@pytest.fixture(scope="session")
def x4(pf4, net4):
    return extract_steady_state(pf4, net4)


@pytest.fixture(scope="session")
def x38(pf38, net38):
    return extract_steady_state(pf38, net38)


@pytest.fixture(scope="session")
def ctrl4():
    """Two DGs talking to each other, DG 1 pinned."""
    return CommGraph.from_edges(2, [(0, 1)]), np.array([True, False]), ControlGains()


@pytest.fixture(scope="session")
def ctrl38():
    pins = np.zeros(10, dtype=bool)
    pins[[0, 4]] = True
    return ring_lattice(10, 4), pins, ControlGains()


# acceptance results, one line per criterion, repeated in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
