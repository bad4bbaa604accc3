import numpy as np
import pytest

from drunknown.core import Context, Dataset, StepRecord, Trajectory
from drunknown.policies import ConstantPolicy, SoftmaxLinearPolicy


def make_trajectory(actions, rewards, K=2, d=1, props=None):
    steps = []
    for t, (a, r) in enumerate(zip(actions, rewards)):
        p = None if props is None else props[t]
        steps.append(StepRecord(Context(np.zeros((K, d))), a, r, p))
    return Trajectory(tuple(steps))


def softmax_bandit(n, phi_mu, K=4, seed=0, beta=None, noise=1.0):
    """One-step data from a softmax logging policy with linear mean reward ``x_aᵀβ``."""
    rng = np.random.default_rng(seed)
    d = len(phi_mu)
    X = rng.uniform(-1, 1, (n, K, d))
    mu = SoftmaxLinearPolicy(phi_mu).probs(X)
    u = rng.random(n)
    a = np.minimum((u[:, None] > np.cumsum(mu, axis=-1)).sum(-1), K - 1)
    beta = np.ones(d) if beta is None else np.asarray(beta)
    r = X[np.arange(n), a] @ beta + noise * rng.standard_normal(n)
    return Dataset(X[:, None], a[:, None], r[:, None], 1.0, mu[np.arange(n), a][:, None])


@pytest.fixture
def small_bandit():
    return softmax_bandit(300, np.array([0.8, -0.5]), K=3, seed=11)


@pytest.fixture
def constant_pair():
    return ConstantPolicy([0.7, 0.3]), ConstantPolicy([0.75, 0.25])


# acceptance report: one line per criterion, repeated in the terminal summary
_ACCEPTANCE = []


@pytest.fixture
def record():
    def _record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
