def pytest_terminal_summary(terminalreporter):
    results = getattr(__import__("sys").modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
