import pytest

_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance verdict; printed in the terminal summary."""

    def _report(number, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        _ACCEPTANCE[(number, name)] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
