import numpy as np
import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        passed, detail = CRITERIA[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {key:>2}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
