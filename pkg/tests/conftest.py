import numpy as np
import pytest

from taxiplay.graph import from_edges, grid_graph


@pytest.fixture(scope="session")
def grid5():
    return grid_graph(5, 5)


@pytest.fixture
def line3():
    """Bidirectional path 0 - 1 - 2."""
    return from_edges([(0, 1), (1, 0), (1, 2), (2, 1)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
