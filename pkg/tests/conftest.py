import numpy as np
import pytest

from p2pfaas.core import Batch
from p2pfaas.dataset import DatasetSpec, ObjectStore, generate

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def store(tmp_path):
    return ObjectStore(tmp_path / "store")


@pytest.fixture(scope="session")
def blobs():
    return generate(DatasetSpec(samples=2000, separation=3.0, seed=1))


def random_batch(rng, n, d, k, batch_id=0):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, k, n), batch_id)


def central_difference(f, x, h=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
