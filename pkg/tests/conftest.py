"""Shared pytest plumbing.

The acceptance tests record one human-readable verdict line per criterion;
printing them from inside a test would be swallowed by pytest's capture, so
they are replayed in a terminal section after the run summary.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
