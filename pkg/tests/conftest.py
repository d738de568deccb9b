import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cbmr.spline_basis import build_design
from cbmr.synthetic import ellipsoid_mask

settings.register_profile(
    "cbmr", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("cbmr")


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="cbmr")


@pytest.fixture(scope="session")
def small_mask():
    """About 4k voxels; fast enough for repeated fits."""
    return ellipsoid_mask((20, 24, 20))


@pytest.fixture(scope="session")
def small_design(small_mask):
    return build_design(small_mask, 20.0)


@pytest.fixture(scope="session")
def reduced_mask():
    """About 20k voxels, the scale used by the calibration experiments."""
    return ellipsoid_mask((34, 40, 34))


@pytest.fixture(scope="session")
def reduced_design(reduced_mask):
    return build_design(reduced_mask, 20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the acceptance summary and fail on FAIL."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def check(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        lines.append(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
