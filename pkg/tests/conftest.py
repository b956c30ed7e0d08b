"""Collects acceptance verdict lines and prints them after the test report."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance verdicts")
    for line in VERDICTS:
        terminalreporter.write_line(line)
