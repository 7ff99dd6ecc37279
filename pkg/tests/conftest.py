def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by ``test_acceptance.report``."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[k])
