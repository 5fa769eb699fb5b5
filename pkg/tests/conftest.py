import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    suite = sys.modules.get("acceptance_suite")
    if suite is not None and suite.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(suite.REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
