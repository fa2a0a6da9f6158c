import sys

import numpy as np
import pytest

from faun.fl import FLConfig


@pytest.fixture
def tiny_fl():
    return FLConfig(num_clients=6, num_malicious=2, rounds=4, local_epochs=1, batch_size=8,
                    lr=0.05, momentum=0.9)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
