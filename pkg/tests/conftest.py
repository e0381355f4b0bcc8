import acceptance_report


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_report.LINES
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines.items()):
            terminalreporter.write_line(text)
