import pytest


@pytest.fixture
def record(request):
    """record(number, ok, detail) stores one acceptance line for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def _record(number, ok, detail=""):
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
