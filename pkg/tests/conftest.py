import numpy as np
import pytest

from bisimlab.mdp import Policy, TabularMdp, make_garnet


def two_absorbing(r0=0.0, r1=1.0, discount=0.5):
    t = np.zeros((2, 1, 2))
    t[0, 0, 0] = t[1, 0, 1] = 1.0
    return TabularMdp(t, [[r0], [r1]], discount)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def garnet5():
    mdp = make_garnet(5, 2, 3, 0.2, seed=3, discount=0.9)
    pol = Policy.random(5, 2, np.random.default_rng(3), min_prob=0.05)
    return mdp, pol
