import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RAN:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.summary_lines():
        terminalreporter.write_line(line)
