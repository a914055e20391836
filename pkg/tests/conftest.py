import numpy as np
import pytest

from proalign.core import PrototypeBank, Stage

ACCEPTANCE_LINES = []


@pytest.fixture
def worked_X():
    return np.array([[1, 1], [2, 0], [0, 3]], dtype=np.float32)


@pytest.fixture
def worked_P():
    return np.array([[1, 2], [3, 1]], dtype=np.float32)


@pytest.fixture
def worked_bank(worked_P):
    return PrototypeBank(Stage.INITIAL, worked_P)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
