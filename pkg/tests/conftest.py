from pathlib import Path

import pytest

from meshprop import data

MNIST_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() and (MNIST_DIR / "t10k-images-idx3-ubyte").exists()


@pytest.fixture(scope="session")
def mnist_test():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return data.load_mnist_dir(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def mnist_train():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return data.load_mnist_dir(MNIST_DIR, "train")


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records and prints one acceptance line."""
    def report(k: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
