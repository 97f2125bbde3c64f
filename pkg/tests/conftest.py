import os
from pathlib import Path

import numpy as np
import pytest

from cobformer.graph import Graph

CORA_DIR = Path(os.environ.get("COBFORMER_CORA_DIR", Path(__file__).resolve().parents[1] / "data" / "cora"))

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    prev = _ACCEPTANCE.get(name, "PASS")
    if report.failed:
        _ACCEPTANCE[name] = "FAIL"
    elif report.skipped and report.when != "teardown":
        _ACCEPTANCE[name] = "FAIL (skipped)"
    elif report.when == "call":
        _ACCEPTANCE[name] = prev


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:5s} {name}")


def graph_of(n, edges):
    g, _ = Graph.from_edges(n, edges)
    return g


@pytest.fixture
def path_graph():
    """a-b-c-d."""
    return graph_of(4, [(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
