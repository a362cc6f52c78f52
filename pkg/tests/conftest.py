import pytest

_ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """Record the one-line outcome of an acceptance criterion."""
    def _report(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[name] = line
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_ACCEPTANCE_LINES, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(_ACCEPTANCE_LINES[name])
