import os

import pytest
from hypothesis import HealthCheck, settings

from sopf.grid import CostCoefficients, ieee33

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def feeder():
    return ieee33()


@pytest.fixture(scope="session")
def costs():
    return CostCoefficients()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
