import numpy as np
import pytest

from flowtrack.core_model import BoundingBox, Connection, Detection

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {name}: {detail}")


def box(x, y=0.0, w=10.0, h=10.0):
    return BoundingBox(float(x), float(y), float(w), float(h))


def det(i, frame, x=0.0, conf=1.0, label="body", y=0.0, w=10.0, h=10.0):
    return Detection(i, frame, box(x, y, w, h), conf, label)


@pytest.fixture
def two_chains():
    """Chain A: 0 -> 1, chain B: 2 -> 3, far apart."""
    dets = [det(0, 0, 0), det(1, 1, 0), det(2, 0, 100), det(3, 1, 100)]
    conns = [Connection(0, 1, 1.0), Connection(2, 3, 1.0)]
    return dets, conns


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
