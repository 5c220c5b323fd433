import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture(scope="session")
def report():
    """Record (and print) a one-line verdict for an acceptance criterion."""

    def _report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _LINES.append((number, line))
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
