import numpy as np
import pytest

from isaac.nn import LayerTape


def random_tape(seed, b, n, m, r=1, rank_x=None):
    """Tape with Gaussian X, g and curvature rows, float64."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, n))
    if rank_x is not None:
        x = rng.standard_normal((b, rank_x)) @ rng.standard_normal((rank_x, n))
    g = rng.standard_normal((b, m))
    gbar = rng.standard_normal((r * b, m)) / np.sqrt(r)
    return LayerTape(x=x, z=np.zeros((b, m)), g=g, g_sampled=gbar)


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture
def tape_factory():
    return random_tape


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
