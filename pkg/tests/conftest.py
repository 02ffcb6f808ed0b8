import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_GATE: dict = {}


@pytest.fixture
def gate():
    """Record one acceptance line: gate(n, ok, detail)."""
    def record(n, ok, detail):
        _GATE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_GATE):
        ok, detail = _GATE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
