import contextlib
import time

import pytest

RESULTS = {}


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        start = time.perf_counter()
        notes = []
        try:
            yield notes
        except BaseException:
            RESULTS[number] = ("FAIL", title, time.perf_counter() - start, notes)
            raise
        RESULTS[number] = ("PASS", title, time.perf_counter() - start, notes)

    return record


def format_result(number):
    status, title, seconds, notes = RESULTS[number]
    extra = f" ({'; '.join(notes)})" if notes else ""
    return f"[{status}] criterion {number}: {title}{extra} [{seconds:.1f}s]"


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(format_result(number))
