from __future__ import annotations

import numpy as np
import pytest

from nmacausal.cli import load_mrsa
from nmacausal.data_model import Dataset, OutcomeKind, OutcomeSummary
from nmacausal.simulation import DgpConfig, generate_dataset


def continuous(rows, labels=None) -> Dataset:
    """rows: (study, W, label, n, mean, sd)."""
    return Dataset.from_rows(
        [(s, {"W": w}, lab, n, OutcomeSummary.continuous(m, sd)) for s, w, lab, n, m, sd in rows],
        OutcomeKind.CONTINUOUS, labels,
    )


@pytest.fixture(scope="session")
def mrsa() -> Dataset:
    return load_mrsa()


@pytest.fixture(scope="session")
def sim15() -> Dataset:
    return generate_dataset(DgpConfig(n_studies=15))


@pytest.fixture(scope="session")
def sim50() -> Dataset:
    return generate_dataset(DgpConfig(n_studies=50))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
