import warnings

import numpy as np
import pytest
from hypothesis import settings

from emgest.shapes import AsymptoticRegimeWarning, build_shape
from emgest.sphere import lebedev_grid

settings.register_profile("emgest", max_examples=40, deadline=None)
settings.load_profile("emgest")


@pytest.fixture(autouse=True)
def _quiet_asymptotics():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AsymptoticRegimeWarning)
        yield


@pytest.fixture(scope="session")
def grid110():
    return lebedev_grid(110)


@pytest.fixture(scope="session")
def cube():
    return build_shape("cube", [(0, 0, 0)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
