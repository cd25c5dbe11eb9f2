import numpy as np
import pytest

from adaptive_limits.stochastic import make_rng


@pytest.fixture
def rng():
    return make_rng(20240601)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def assert_close(a, b, rel=1e-10, abs_=0.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    assert np.allclose(a, b, rtol=rel, atol=abs_), (a, b)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, printed at the end of the run."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
