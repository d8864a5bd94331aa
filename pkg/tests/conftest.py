import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carrollian import presets

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def flat():
    return presets.flat_carroll(3)


@pytest.fixture(scope="session")
def flat2():
    return presets.flat_carroll(2)


@pytest.fixture(scope="session")
def line():
    return presets.vector_field_line()


@pytest.fixture(scope="session")
def rot():
    return presets.rotation()


@pytest.fixture(scope="session")
def gl2_action():
    return presets.action_gl2()


@pytest.fixture(scope="session")
def gl2_algebra():
    return presets.lie_algebra_gl2()


@pytest.fixture(scope="session")
def nonstat():
    return presets.nonstationary_tangent()


@pytest.fixture(scope="session")
def dsum():
    return presets.direct_sum()


@pytest.fixture(scope="session")
def poincare():
    return presets.poincare_half_plane()


@pytest.fixture(scope="session")
def shipped():
    return presets.shipped_presets()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
