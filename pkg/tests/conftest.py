import numpy as np
import pytest

from spapnet.graph import build_graph

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def graph():
    return build_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criterion_report():
    """``report(number, ok, detail)`` records one pass/fail line per acceptance criterion."""

    def report(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
