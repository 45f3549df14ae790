import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def report(number: int, passed: bool, detail: str) -> None:
        _LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_LINES[number])
        assert passed, detail

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])
