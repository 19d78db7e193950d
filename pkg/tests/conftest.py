from __future__ import annotations

import sys

import pytest

from lowdiff.model import AdamConfig, LayeredWorkload


@pytest.fixture
def adam():
    return AdamConfig(learning_rate=1e-2)


@pytest.fixture
def small_workload():
    return LayeredWorkload([30, 40, 30], design_matrix_seed=3, target_seed=4, num_workers=4, rows_per_worker=12)


def pytest_terminal_summary(terminalreporter):
    results = None
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")
