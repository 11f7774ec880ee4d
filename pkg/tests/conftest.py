import numpy as np
import pytest

_LINES = []


def record(n, name, ok, detail=""):
    """Log one acceptance line; printed in the terminal summary."""
    _LINES.append(f"{'PASS' if ok else 'FAIL'}  [{n}] {name}  {detail}".rstrip())
    print(_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
