import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def report_criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and echo it immediately."""
    terminal = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(number, title, ok, detail, seconds):
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'} | {title} | {detail} | {seconds:.1f}s"
        _CRITERIA[number] = line
        if terminal is not None:
            terminal.write_line("")
            terminal.write_line(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
