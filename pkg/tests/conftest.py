from pathlib import Path

import pytest

from reramft.harness.io import load_mnist, load_model

ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = ROOT / "data" / "mnist"
REF_MODEL = ROOT / "data" / "models" / "mlp_784_128_10.rfsm"

# Test accuracy of the shipped reference MLP (trained with `reramft train --seed 0`).
REF_MODEL_ACCURACY = 0.9769

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def ref_model():
    return load_model(REF_MODEL)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail):
        _ACCEPTANCE.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
