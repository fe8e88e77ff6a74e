"""Shared fixtures and small helpers for the test suite."""

import numpy as np
import pytest

from rrmkit.data import Dataset, SyntheticSpec, generate_synthetic
from rrmkit.models import build_model, mlp_descriptor


# Verdict lines recorded by the acceptance suite; echoed after the run so
# each criterion shows exactly one PASS/FAIL line in the terminal output.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_mlp():
    """A small 3->4->2 MLP, deterministic."""
    desc = mlp_descriptor(3, hidden=(4,), num_classes=2)
    return build_model(desc, np.random.default_rng(7), seed=7)


@pytest.fixture
def tiny_batch(rng):
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    return x, y


@pytest.fixture
def small_synthetic():
    spec = SyntheticSpec(n=200)
    return generate_synthetic(spec, np.random.default_rng(11))


def make_dataset(n=20, d=3, seed=0) -> Dataset:
    r = np.random.default_rng(seed)
    return Dataset(
        inputs=r.normal(size=(n, d)),
        labels=r.integers(0, 2, size=n),
        metadata={},
    )
