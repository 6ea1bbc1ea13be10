"""Shared test plumbing.

The acceptance tests record one verdict line each; printing them from a
terminal-summary hook keeps the per-criterion record visible in a plain
``pytest -v`` run, where captured stdout of passing tests is hidden.
"""

ACCEPTANCE_VERDICTS = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
