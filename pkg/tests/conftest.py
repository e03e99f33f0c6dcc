import time
from dataclasses import dataclass

import pytest

_RESULTS = []


@dataclass
class Outcome:
    number: int
    title: str
    status: str = "FAIL"
    detail: str = ""
    seconds: float = 0.0


class Criterion:
    """Times one acceptance criterion and records its verdict for the summary."""

    def __init__(self, number, title, budget):
        self.outcome = Outcome(number, title)
        self.budget = budget
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        o = self.outcome
        o.seconds = time.perf_counter() - self.t0
        if exc_type is None and o.seconds > self.budget:
            self.details.append(f"runtime {o.seconds:.1f}s exceeds {self.budget:g}s")
        elif exc_type is pytest.skip.Exception:
            o.status = "SKIP"
            self.details.append(str(exc))
        elif exc_type is None:
            o.status = "PASS"
        else:
            self.details.append(f"{exc_type.__name__}: {exc}".splitlines()[0][:160])
        o.detail = "; ".join(self.details)
        _RESULTS.append(o)
        line = f"[{o.status}] criterion {o.number}: {o.title} ({o.seconds:.1f}s) {o.detail}"
        print(line)
        if exc_type is None and o.status == "FAIL":
            pytest.fail(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for o in sorted(_RESULTS, key=lambda r: r.number):
        terminalreporter.write_line(f"[{o.status}] criterion {o.number}: {o.title} ({o.seconds:.1f}s) {o.detail}")
