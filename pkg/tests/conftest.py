import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Print and remember one pass/fail line, then assert it."""

    def emit(label: str, ok: bool, detail: str) -> None:
        line = f"{label} [{'PASS' if ok else 'FAIL'}] {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
