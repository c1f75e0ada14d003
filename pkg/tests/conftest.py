def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in test_acceptance.CRITERIA:
        if key in test_acceptance.RESULTS:
            terminalreporter.write_line(test_acceptance.result_line(key))
