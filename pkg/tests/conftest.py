import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20140101)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
