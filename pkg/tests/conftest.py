import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ztafl.data import Dataset, generate_synthetic, minmax_normalize, split
from ztafl.model import MlpModel

settings.register_profile("ztafl", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ztafl")


@pytest.fixture(scope="session")
def small_data():
    full = generate_synthetic(1200, 12, 4, seed=3)
    (tr, va, te), _ = minmax_normalize(*split(full, seed=4))
    return tr, va, te


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return MlpModel.init((6, 8, 5, 3), seed=11)


def make_dataset(n, d, C, seed=0):
    r = np.random.default_rng(seed)
    return Dataset(r.random((n, d)), r.integers(0, C, n), [str(c) for c in range(C)])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
