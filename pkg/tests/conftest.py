import contextlib
import time

import pytest

_CRITERIA: list[tuple[int, str, bool, str, float]] = []


class _Criterion:
    def __init__(self):
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """Context manager that records one acceptance criterion as PASS or FAIL."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = _Criterion()
        t0 = time.perf_counter()
        passed = False
        try:
            yield c
            passed = True
        except AssertionError as exc:
            c.note(f"assertion: {str(exc).splitlines()[0] if str(exc) else 'failed'}")
            raise
        finally:
            elapsed = time.perf_counter() - t0
            _CRITERIA.append((number, title, passed, "; ".join(c.details), elapsed))
            print(f"\nCRITERION {number:2d} {'PASS' if passed else 'FAIL'} ({elapsed:.1f}s) {title}: {'; '.join(c.details)}")

    return run


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail, elapsed in sorted(_CRITERIA):
        terminalreporter.write_line(
            f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'} ({elapsed:6.1f}s) {title}: {detail}"
        )
