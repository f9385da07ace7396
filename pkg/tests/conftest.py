import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from critl3.presets import preset_initial_data
from critl3.spectral import Grid

settings.register_profile("desk", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("desk")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the lines are echoed in the terminal summary."""
    def _record(number: int, title: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid16():
    return Grid(2 * math.pi, 16)


@pytest.fixture(scope="session")
def grid32():
    return Grid(2 * math.pi, 32)


@pytest.fixture(scope="session")
def bump32(grid32):
    return preset_initial_data("bump", grid32)


@pytest.fixture(scope="session")
def bump16(grid16):
    return preset_initial_data("bump", grid16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
