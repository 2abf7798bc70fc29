import pytest

_VERDICTS = {}
_NUM_CRITERIA = 11


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome, then assert it."""

    def record(num, ok, detail):
        _VERDICTS[num] = (bool(ok), detail)
        assert ok, f"criterion {num}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [i.nodeid for i in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])]
    if not _VERDICTS and not any("criterion" in str(n) for n in ran):
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, _NUM_CRITERIA + 1):
        if num in _VERDICTS:
            ok, detail = _VERDICTS[num]
            terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {num:2d}: NOT RUN")
