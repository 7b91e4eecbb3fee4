import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_psd(rng, n, rank=None):
    """Random PSD matrix with unit-scale entries."""
    rank = n if rank is None else rank
    A = rng.standard_normal((n, rank))
    K = A @ A.T / rank
    return 0.5 * (K + K.T)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


#: One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = {}


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
