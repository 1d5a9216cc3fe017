import numpy as np
import pytest

from iglmdp.decoder import env_constants
from iglmdp.env import ContextModel, FeedbackModel, IglEnv, LayeredMdp, build_synthetic_env

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def env():
    return build_synthetic_env()


@pytest.fixture(scope="session")
def consts(env):
    return env_constants(env)


def chain_env(K=2, reward=0.0, c=None):
    """Three-layer env where every action moves to the single next state."""
    P = np.zeros((3, K, 3))
    P[0, :, 1] = 1.0
    P[1, :, 2] = 1.0
    mdp = LayeredMdp(layers=([0], [1], [2]), n_actions=K, transition=P, state_labels=("a", "b", "t"))
    f = np.full((1, 3, K), float(reward))
    C = np.zeros((1, 3, 2, 2))
    C[0, :, 0, 0] = C[0, :, 1, 1] = 1.0
    return IglEnv(mdp, ContextModel(("x",), [1.0]), FeedbackModel(f, C), M=0.5, theta=0.9,
                  c=reward if c is None else c)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
