import pytest

from acceptance_report import REPORT


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(REPORT):
        ok, details = REPORT[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")


@pytest.fixture(scope="session")
def report():
    return REPORT
