import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Record one acceptance outcome; the summary prints a line per criterion."""

    def _record(name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS.append((name, bool(passed), detail))
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
