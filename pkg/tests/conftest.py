import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns ``passed`` so tests can assert on it."""
    def record(number, name, passed, detail=""):
        status = passed if isinstance(passed, str) else "PASS" if passed else "FAIL"
        line = f"criterion {number:>2} {status:4s} {name}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
