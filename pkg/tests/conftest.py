import numpy as np
import pytest
from hypothesis import settings

from coalsis.model import MutationModel, SiteFlipModel

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_stochastic(rng, d, zeros=False):
    """Random irreducible row-stochastic matrix."""
    while True:
        P = rng.random((d, d))
        if zeros:
            P[rng.random((d, d)) < 0.3] = 0.0
        P[np.arange(d), (np.arange(d) + 1) % d] += 0.1
        P /= P.sum(axis=1, keepdims=True)
        try:
            MutationModel(1.0, P)
            return P
        except ValueError:
            continue


def flip_matrix(L):
    """Dense transition matrix of the site-flip model on ``L`` sites."""
    d = 1 << L
    P = np.zeros((d, d))
    for i in range(d):
        for s in range(L):
            P[i, i ^ (1 << s)] = 1.0 / L
    return P


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def swap_model():
    return MutationModel(1.0, np.array([[0.0, 1.0], [1.0, 0.0]]))


@pytest.fixture
def flip3():
    return SiteFlipModel(0.7, 3), MutationModel(0.7, flip_matrix(3))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
