def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance gate's per-criterion lines after the test run."""
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "CRITERION_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
