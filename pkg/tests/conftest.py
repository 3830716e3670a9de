import numpy as np
import pytest

from fedsim.numerics import ParamVector

ACCEPTANCE_LINES = []


def vec(*values):
    return ParamVector(np.array(values, dtype=np.float64), (("w", (len(values),)),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
