import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hyptsp.hgeom import HPoint

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_points(rng, n, d=2, width=3.0, log_height=1.5):
    return [
        HPoint(tuple(rng.uniform(-width, width, d - 1)), float(np.exp(rng.uniform(-log_height, log_height))))
        for _ in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
