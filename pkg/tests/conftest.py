import pytest

from ionkzm.physical_model import TrapParameters

#: one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def trap():
    return TrapParameters()
