"""Collects the acceptance lines and prints them as one block at the end of the session."""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """``acceptance(n, ok, detail)`` records and prints one line for criterion ``n``."""
    def record(n, ok, detail):
        status = "PASS" if ok is True else ("FAIL" if ok is False else ok)
        line = f"criterion {n:>2}: {status} {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
