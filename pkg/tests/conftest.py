import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts after the run, outside stdout capture."""
    acceptance = sys.modules.get("tests.test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for line in verdicts:
        terminalreporter.write_line(line)
