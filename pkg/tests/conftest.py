import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from semsurfel.config import RunConfig
from semsurfel.geometry import se3_exp

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def cfg():
    return RunConfig()


@pytest.fixture
def small_cfg():
    return RunConfig(width=128, height=32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_pose(rng, t_scale=1.0, r_scale=0.5):
    return se3_exp(np.concatenate([rng.normal(0, t_scale, 3), rng.normal(0, r_scale, 3)]))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
