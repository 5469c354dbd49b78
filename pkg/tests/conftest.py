import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpcrl.mdp.core import Environment, PolicyInterface

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ConstantPolicy(PolicyInterface):
    def __init__(self, a, m=1):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.m = m

    def deterministic_act(self, s):
        return self.a.copy()


class TablePolicy(PolicyInterface):
    """Deterministic tabular policy: action index per state index."""
    m = 1

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=int)

    def deterministic_act(self, s):
        return np.array([float(self.actions[int(s[0])])])


class StillEnv(Environment):
    """s' = s, r = 0."""
    n = 1
    m = 1

    def sample_initial(self, rng):
        return np.array([0.25])

    def step(self, s, a, rng):
        return s.copy(), 0.0


class DriftEnv(Environment):
    """Deterministic scalar plant s' = 0.5 s + a, r = -s^2."""
    n = 1
    m = 1

    def sample_initial(self, rng):
        return np.array([1.0])

    def step(self, s, a, rng):
        return 0.5 * s + a, float(-s[0] ** 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE[key])
