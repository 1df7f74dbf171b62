import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blowup_lab import spectral
from blowup_lab.grids import RadialGrid

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid128():
    return RadialGrid(128)


@pytest.fixture(scope="session")
def decomp128(grid128):
    return spectral.decompose(grid128, ell_max=2, k=2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""

    def add(number, passed, detail):
        ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"))

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
