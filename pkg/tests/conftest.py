import numpy as np
import pytest

from skewreg.grid import build_grid


@pytest.fixture(scope="session")
def g33():
    return build_grid(33)


@pytest.fixture(scope="session")
def g65():
    return build_grid(65)


@pytest.fixture(scope="session")
def g129():
    return build_grid(129)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance verdicts collected by tests/test_acceptance.py, echoed at the end of the run.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
