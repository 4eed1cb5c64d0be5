import numpy as np
import pytest

from mlab import geometry as g
from mlab.paths import make_stream, simulate_path


def simulate_many(pcfg, warp, policy, n_paths, seed=1):
    return [simulate_path(pcfg, warp, policy, make_stream(seed, i)) for i in range(n_paths)]


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


@pytest.fixture(scope="session")
def flat():
    return g.solve_jacobi(g.euclidean(), 1e12)


@pytest.fixture(scope="session")
def hyp():
    return g.solve_jacobi(g.hyperbolic(1.0), 100.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
