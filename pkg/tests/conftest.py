import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def clouds(min_points=1, max_points=60, scale=10.0):
    """Hypothesis strategy for finite (n, 3) float clouds."""
    n = st.integers(min_points, max_points)
    elems = st.floats(-scale, scale, allow_nan=False, allow_infinity=False, width=64)
    return n.flatmap(lambda k: arrays(np.float64, (k, 3), elements=elems))


def random_cloud(rng, n=None, scale=10.0):
    n = int(rng.integers(1, 400)) if n is None else n
    return rng.normal(size=(n, 3)) * scale * rng.uniform(0.1, 1.0, size=3)


def same_rows(a, b):
    """Row sets equal, order ignored."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    return np.array_equal(a[np.lexsort(a.T)], b[np.lexsort(b.T)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def report(criterion: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
