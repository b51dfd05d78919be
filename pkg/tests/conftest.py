import numpy as np
import pytest

from loopsr.terrasim import EnvParams, rollout_batch


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_policy(seed):
    rng = np.random.default_rng(seed)
    return lambda obs: rng.uniform(-1.0, 1.0, size=len(obs))


@pytest.fixture(scope="session")
def small_records():
    """40 labeled trajectories of 12 steps under the pretraining randomization."""
    seeds = [[77, i] for i in range(40)]
    return rollout_batch(EnvParams.pretraining(), random_policy(5), seeds, T=12, checkpoint_id=1).records


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
