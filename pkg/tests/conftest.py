import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(2023)


@pytest.fixture
def path3():
    from chargeforecast.data import ZoneGraph
    return ZoneGraph.from_edges(3, [(0, 1), (1, 2)])


@pytest.fixture
def toy5():
    from chargeforecast.data import ZoneGraph
    return ZoneGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)])


# one summary line per acceptance criterion, printed after the test run
_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
