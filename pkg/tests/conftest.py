import numpy as np
import pytest

from botnet_gnn import autodiff as ad

# acceptance results collected for the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _deterministic_engine():
    ad.set_fast_mode(False)
    yield
    ad.set_fast_mode(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
