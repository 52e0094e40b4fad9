import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line, print it and fail the test if the criterion does not hold.

    ``ok=None`` marks a part that cannot be measured on this machine; it is skipped, not passed.
    """
    def report(name, ok, detail):
        line = f"{name} {'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        VERDICTS.append(line)
        if ok is None:
            pytest.skip(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
