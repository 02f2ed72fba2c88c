import contextlib
import time

import pytest

_KEY = pytest.StashKey[list]()


class _Outcome:
    def __init__(self):
        self.passed = False
        self.detail = ""

    def set(self, passed, detail):
        self.passed = bool(passed)
        self.detail = detail


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's verdict.

    The body calls ``c.set(passed, detail)``; an exception counts as FAIL.
    The test itself fails if the verdict is FAIL.
    """
    log = request.config.stash.setdefault(_KEY, [])

    @contextlib.contextmanager
    def run(number, title, budget=None):
        out = _Outcome()
        start = time.perf_counter()
        try:
            yield out
        except Exception as exc:
            out.set(False, f"{type(exc).__name__}: {exc}")
            raise
        finally:
            took = time.perf_counter() - start
            if budget is not None and took >= budget:
                out.set(False, f"{out.detail}; took {took:.1f} s, budget {budget} s")
            line = f"criterion {number:2d} {title}: {'PASS' if out.passed else 'FAIL'} ({out.detail}; {took:.1f} s)"
            log.append((number, line))
            print(line)
        assert out.passed, line

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_KEY, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(log):
        terminalreporter.write_line(line)
