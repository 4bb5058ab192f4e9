import numpy as np
import pytest

from fuzzydp.cmdp import TabularCMDP


def random_cmdp(rng, S=10, A=3, gamma=0.9, branching=3, budget=np.inf):
    """Sparse random CMDP with rewards and costs in [0, 1]."""
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            nxt = rng.choice(S, size=min(branching, S), replace=False)
            P[s, a, nxt] = rng.dirichlet(np.ones(len(nxt)))
    r = rng.uniform(0, 1, (S, A))
    c = rng.uniform(0, 1, (S, A))
    d0 = rng.dirichlet(np.ones(S))
    return TabularCMDP(S, A, P, r, c, gamma, d0, budget)


def two_state_cmdp(budget=3.0):
    P = np.zeros((2, 2, 2))
    P[0, 0] = [0.9, 0.1]
    P[0, 1] = [0.2, 0.8]
    P[1, 0] = [0.7, 0.3]
    P[1, 1] = [0.1, 0.9]
    r = [[0.2, 1.0], [0.1, 1.2]]
    c = [[0.0, 1.0], [0.1, 0.6]]
    return TabularCMDP(2, 2, P, r, c, 0.9, [1.0, 0.0], budget)


def self_loop(r=1.0, gamma=0.5, c=0.0):
    return TabularCMDP(1, 1, np.ones((1, 1, 1)), [[r]], [[c]], gamma, [1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
