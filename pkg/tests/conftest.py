import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from redirtrans import checks
from redirtrans import redirector as R
from redirtrans import world as W

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criteria report one line each at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    return checks.small_world()


@pytest.fixture(scope="session")
def small_data(small_world):
    return W.sample_dataset(small_world, 12, 3, seed=5)


def _randomize(params, g):
    for name, t in params.tensors.items():
        if name.endswith("fc1/w"):
            t.data = (0.3 * g.standard_normal(t.shape)).astype(np.float32)
        if name == "weights":
            t.data = g.uniform(0.2, 1.0, t.shape).astype(np.float32)
    return params


@pytest.fixture
def random_layerwise(small_world, rng):
    """Layerwise redirector with every output layer nonzero."""
    return _randomize(R.init_redirector("layerwise", small_world.K, small_world.D, seed=3), rng)


@pytest.fixture
def random_flat(small_world, rng):
    return _randomize(R.init_redirector("flat", small_world.K, small_world.D, seed=4), rng)


@pytest.fixture(scope="session")
def small_estimator(small_world, small_data):
    params, _ = W.pretrain_estimator(small_world, small_data, "train", seed=2, epochs=3)
    return params
