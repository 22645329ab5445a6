import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twlab.grid import Grid
from twlab.measure import Measure, random_doubling

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("TW_LAB_HYPOTHESIS", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def doubling_pair_1d():
    g = Grid(1, 7)
    return random_doubling(g, 0.3, 11), random_doubling(g, 0.3, 12)


@pytest.fixture(scope="session")
def lebesgue_1d():
    g = Grid(1, 6)
    return Measure.lebesgue(g), Measure.lebesgue(g)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    log = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        log.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
