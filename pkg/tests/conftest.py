import numpy as np
import pytest

from dssl.data import Dataset, make_synthetic_tiny


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("DSSL_CACHE_DIR", str(tmp_path_factory.getbasetemp() / "dssl-cache"))


@pytest.fixture(scope="session")
def tiny_dataset():
    """40 train / 20 test images; enough for smoke runs."""
    xtr, ytr, xte, yte = make_synthetic_tiny(seed=3, n_train=40, n_test=20)
    return Dataset("synthetic-tiny", xtr, ytr, xte, yte, checksum="tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=32, w=32):
    return rng.random((3, h, w), dtype=np.float32)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
