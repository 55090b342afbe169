import pytest

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line for the acceptance summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: str, passed: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
