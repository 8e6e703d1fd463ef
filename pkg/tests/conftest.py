"""Shared pytest plumbing.

The acceptance tests record one ``CRITERION <n> PASS|FAIL`` line each; this
hook replays them in the terminal summary so they are visible in a default
(captured) run, not only under ``-s``.
"""

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
