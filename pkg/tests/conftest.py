import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vmbpo.envs import make_chain, make_random_mdp, make_twist2  # noqa: E402
from vmbpo.mdp import uniform_policy  # noqa: E402

E_CONST = np.e
# log((e + 1) / 2): CHAIN2 value under the uniform policy at eta = 1
CHAIN_VALUE = float(np.log((E_CONST + 1) / 2))
# e / (e + 1)
TWIST_PROB = float(E_CONST / (E_CONST + 1))


def random_policy(mdp, rng):
    return rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)


def random_mdps(count, seed0=0):
    """The 50-instance family: up to 8 states, 4 actions, 5 layers."""
    rng = np.random.default_rng(seed0)
    out = []
    for i in range(count):
        n_states = int(rng.integers(2, 9))
        layers = int(rng.integers(1, min(5, n_states - 1) + 1))
        n_actions = int(rng.integers(1, 5))
        out.append(make_random_mdp(n_states, n_actions, layers, seed=1000 + i))
    return out


@pytest.fixture
def chain():
    return make_chain()


@pytest.fixture
def twist2():
    return make_twist2()


@pytest.fixture
def chain_pi(chain):
    return uniform_policy(chain)


@pytest.fixture(scope="session")
def mdp_family():
    return random_mdps(50)
