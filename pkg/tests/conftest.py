import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


@pytest.fixture
def record():
    """Record one acceptance criterion; the summary is printed at the end of the session."""
    def _record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE[n] = (title, bool(ok), detail)
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} {detail}")
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title} {detail}")
