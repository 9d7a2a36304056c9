"""Shared pytest wiring: acceptance verdict lines echoed in the summary."""

import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    def record(line: str) -> None:
        _VERDICTS.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
