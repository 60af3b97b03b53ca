import pytest

from mcki.cases import parse_cases
from mcki.fixtures import generate_case_records

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, outcome in sorted(_CRITERIA.items()):
        label = name.removeprefix("test_").split("_")[0].upper()
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  {label} {status} ({name})")


@pytest.fixture(scope="session")
def small_records():
    return generate_case_records(4, 3, seed=7)


@pytest.fixture(scope="session")
def small_cases(small_records):
    return parse_cases([(f"records[{i}]", r) for i, r in enumerate(small_records)])
