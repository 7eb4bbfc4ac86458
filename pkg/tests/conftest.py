from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from orthotask import data

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA_DIR = Path(__file__).parent / "data"
MNIST_DIR = DATA_DIR / "mnist"


@pytest.fixture(scope="session")
def mnist():
    return data.load_mnist(MNIST_DIR)


@pytest.fixture(scope="session")
def desk_dataset(mnist):
    images, labels = mnist
    return data.build_dataset(images, labels, data.desk_plan(0), 0)


@pytest.fixture(scope="session")
def tiny_dataset(mnist):
    """A few hundred samples for fast end-to-end training checks."""
    images, labels = mnist
    plan = data.desk_plan(1, train_pairs=2, val_pairs=2, samples_per_pair=40)
    return data.build_dataset(images, labels, plan, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
