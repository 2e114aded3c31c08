import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    from vapi.numkernel import SeededRng
    return SeededRng(1234, 0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(99)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(results, key=int):
        rows = results[crit]
        verdict = "PASS" if all(ok for _, ok, _ in rows) else "FAIL"
        tr.write_line(f"criterion {crit:>2}: {verdict}")
        for name, ok, detail in rows:
            tr.write_line(f"    [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
