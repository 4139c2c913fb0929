import numpy as np
import pytest

from aptrain.data import export_mnist5k


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist5k_dir(tmp_path_factory):
    """MNIST-5k as IDX files (4000 train / 1000 test, stratified)."""
    out = tmp_path_factory.mktemp("mnist5k")
    export_mnist5k(out)
    return out


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key} {detail}")
