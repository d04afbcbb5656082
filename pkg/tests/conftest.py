import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shapegnn.dataset import NO_GROUP, NodeTable


def make_table(positions, steps=None, features=None, labels=None, groups=None, truth=None) -> NodeTable:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    return NodeTable(
        ids=np.arange(n),
        time_steps=np.zeros(n, dtype=int) if steps is None else steps,
        positions=positions,
        features=np.ones((n, 2)) if features is None else features,
        labels=np.full(n, np.nan) if labels is None else labels,
        groups=np.full(n, NO_GROUP) if groups is None else groups,
        truth=truth,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from _criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
