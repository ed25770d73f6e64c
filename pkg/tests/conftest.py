import math

import numpy as np
import pytest

from sttw_drift.equilibrium import EquilibriumSpec, solve_numeric
from sttw_drift.params import RobotParams

_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


@pytest.fixture
def record_criterion(request):
    """Collect one summary line per acceptance criterion for the terminal report."""
    lines = request.config.stash[_CRITERIA_KEY]

    def record(line: str) -> None:
        lines.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return RobotParams()


@pytest.fixture(scope="session")
def eq_cs15(params):
    """Counter-steering equilibrium at delta = -15 deg, psi_dot = 1.2 rad/s."""
    return solve_numeric(EquilibriumSpec({"delta": math.radians(-15.0), "psi_dot": 1.2}), params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_states(rng, n):
    """States and inputs spread over the drifting envelope (left and right turns)."""
    xs = np.column_stack(
        [
            rng.uniform(-0.5, 0.5, n),
            rng.uniform(-0.5, 0.5, n),
            rng.uniform(-1.0, 1.0, n),
            rng.uniform(-2.0, 2.0, n),
            rng.uniform(-40.0, -5.0, n),
        ]
    )
    us = np.column_stack([rng.uniform(-1.0, 1.0, n), rng.uniform(-50.0, 0.0, n)])
    return xs, us
