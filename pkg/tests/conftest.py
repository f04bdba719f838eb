import numpy as np
import pytest

from goldilocks.autodiff import Batch, NetworkArchitecture
from goldilocks.datasets import load_mnist_subset


@pytest.fixture(scope="session")
def mnist():
    return load_mnist_subset(4000, 1000, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(arch: NetworkArchitecture, n: int, seed: int = 0) -> Batch:
    r = np.random.default_rng(seed)
    return Batch(r.uniform(0, 1, (n, arch.input_dim)), r.integers(0, arch.n_classes, n))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
