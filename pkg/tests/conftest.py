import os
from pathlib import Path

import pytest

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
               "t10k-labels-idx1-ubyte")

# Lines collected by the acceptance suite and echoed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def _has_mnist(root: Path) -> bool:
    return all((root / f).exists() or (root / (f + ".gz")).exists() for f in MNIST_FILES)


@pytest.fixture(scope="session")
def mnist_dir() -> str:
    root = Path(os.environ.get("COOPEDGE_MNIST", "/root/data/mnist"))
    if not _has_mnist(root):
        pytest.skip(f"MNIST IDX files not found in {root} (set COOPEDGE_MNIST)")
    return str(root)


@pytest.fixture(scope="session")
def report():
    def add(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
