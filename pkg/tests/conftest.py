def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts are printed inside captured stdout; repeat them
    # here so a plain `pytest -v` run still shows one line per criterion
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.VERDICTS:
            terminalreporter.write_line(line)
