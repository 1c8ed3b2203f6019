import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; it is echoed immediately and again in the terminal summary."""

    def _report(number: int, ok: bool, detail: str):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
