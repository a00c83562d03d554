import numpy as np
import pytest

from oapd.network import Branch, Bus, BusKind, Generator, NetworkCase, ieee14


@pytest.fixture(scope="session")
def case14() -> NetworkCase:
    return ieee14()


def two_bus(pd=100.0, qd=0.0, r=0.0, x=0.1, b=0.0, p_max=500.0) -> NetworkCase:
    """Slack at 1.0 pu feeding one PQ load over a single line."""
    return NetworkCase(
        100.0,
        [Bus(1, BusKind.SLACK, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 100.0),
         Bus(2, BusKind.PQ, 1.0, 0.0, pd, qd, 0.0, 0.0, 100.0)],
        [Branch(1, 2, r, x, b)],
        [Generator(1, 0.0, 0.0, 0.0, p_max, -500.0, 500.0, 1.0, 0.0, 0.0)],
    )


def random_case(rng: np.random.Generator, n_bus: int = 5) -> NetworkCase:
    """Small meshed case: slack at bus 1, one PV bus, the rest PQ."""
    buses = [Bus(1, BusKind.SLACK, 1.02, 0.0, 0.0, 0.0, 0.0, 0.0, 100.0),
             Bus(2, BusKind.PV, 1.01, 0.0, rng.uniform(0, 20), rng.uniform(0, 10), 0.0, 0.0, 100.0)]
    for i in range(3, n_bus + 1):
        buses.append(Bus(i, BusKind.PQ, 1.0, 0.0, rng.uniform(5, 40), rng.uniform(-5, 15),
                         rng.uniform(0, 2), rng.uniform(-5, 10), 100.0))
    branches = [Branch(i, i + 1, rng.uniform(0.005, 0.05), rng.uniform(0.05, 0.2), rng.uniform(0, 0.05))
                for i in range(1, n_bus)]
    branches.append(Branch(1, n_bus, rng.uniform(0.005, 0.05), rng.uniform(0.05, 0.2), 0.0,
                           tap=rng.uniform(0.95, 1.05), shift=rng.uniform(-0.05, 0.05)))
    gens = [Generator(1, 0.0, 0.0, 0.0, 1000.0, -1000.0, 1000.0, 1.02, 0.01, 20.0),
            Generator(2, 40.0, 0.0, 0.0, 100.0, -1000.0, 1000.0, 1.01, 0.02, 25.0)]
    return NetworkCase(100.0, buses, branches, gens)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
