import pytest

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """``report(number, passed, detail)`` records one criterion line."""
    def report(number, passed, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
