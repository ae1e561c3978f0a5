import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def emit(line: str) -> None:
        _LINES.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
