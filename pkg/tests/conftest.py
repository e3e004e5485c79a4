from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from fedgdiff.graphs import Graph, GraphSet, load_tu_dataset
from fedgdiff.toy import toy_graphset

REPO = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("FEDGDIFF_DATA", REPO / "data"))


def random_graph(rng, n: int, p: float = 0.4, dim: int = 3, label: int = 0) -> Graph:
    a = np.triu((rng.random((n, n)) < p).astype(np.uint8), 1)
    return Graph(a + a.T, rng.random((n, dim)), label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    return toy_graphset(100)


@pytest.fixture(scope="session")
def mutag() -> GraphSet:
    if not (DATA_ROOT / "MUTAG" / "MUTAG_A.txt").exists():
        pytest.skip(f"MUTAG not found under {DATA_ROOT}")
    return load_tu_dataset(DATA_ROOT / "MUTAG", "MUTAG")


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
