import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lumennav.geometry import generate_environment, straight_tube
from lumennav.render import CameraIntrinsics

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def simple_env():
    return generate_environment("simple", 1)


@pytest.fixture(scope="session")
def complex_env():
    return generate_environment("complex", 3)


@pytest.fixture(scope="session")
def straight():
    return straight_tube(length=300.0, radius=20.0)


@pytest.fixture(scope="session")
def small_cam():
    return CameraIntrinsics(64, 64, 120.0, 300.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA_RESULTS = {}


def record_criterion(number, passed, detail):
    """Store one acceptance verdict; printed again in the terminal summary."""
    CRITERIA_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_RESULTS):
        passed, detail = CRITERIA_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
