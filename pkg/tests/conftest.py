import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(name, ok, detail):
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
