"""Collects the one-line verdicts of the acceptance checks and prints them at the end of the run."""
import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(number, passed, detail)`` for one acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        VERDICTS[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
