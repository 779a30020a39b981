import pytest

_CRITERIA: list = []


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line; call before asserting so failures are reported too."""
    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda x: x[0]):
        terminalreporter.write_line(line)
