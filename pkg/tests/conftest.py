import contextlib
import time

import pytest

_results = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_results] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_results, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])


class _Record:
    detail = ""


@pytest.fixture
def criterion(request):
    """Context manager that times one acceptance criterion and records a PASS/FAIL line."""

    @contextlib.contextmanager
    def run(number: int, title: str, limit_s: float | None = None):
        rec = _Record()
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield rec
            elapsed = time.perf_counter() - t0
            if limit_s is not None and elapsed >= limit_s:
                rec.detail = f"{rec.detail}; over time limit {limit_s:.0f}s".lstrip("; ")
                raise AssertionError(f"criterion {number} took {elapsed:.1f}s (limit {limit_s}s)")
            status = "PASS"
        finally:
            elapsed = time.perf_counter() - t0
            line = f"[{status}] criterion {number:2d}: {title} ({elapsed:.1f}s) {rec.detail}".rstrip()
            request.config.stash[_results].append((number, line))
            print(line)

    return run
