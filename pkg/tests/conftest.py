import logging

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def pipeline():
    """Guide, baseline and variant-II models at the full 20k-iteration budget (several minutes, cached)."""
    from straightfm.repro import run_pipeline

    logging.getLogger("straightfm").setLevel(logging.INFO)
    return run_pipeline()


@pytest.fixture
def report():
    """Record PASS/FAIL lines for the end-of-session summary."""

    def emit(checks):
        for c in checks:
            line = c.line()
            ACCEPTANCE_LINES.append(line)
            print(line)
        return checks

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
