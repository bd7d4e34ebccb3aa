import numpy as np
import pytest

from mstfuse.graph import NetworkGraph, SpanningTree
from mstfuse.local import NodeDataset


def random_datasets(rng, K, n, d, beta=None, sigma=1.0):
    """Gaussian designs; ``beta`` (K, d) defaults to independent N(0, 1) draws."""
    if beta is None:
        beta = rng.standard_normal((K, d))
    out = []
    for i in range(K):
        X = rng.standard_normal((n, d))
        out.append(NodeDataset(X, X @ beta[i] + sigma * rng.standard_normal(n), node_id=i))
    return out


def path_tree(K):
    return SpanningTree(K, [(i, i + 1) for i in range(K - 1)])


def complete_graph(K):
    return NetworkGraph(K, [(i, j) for i in range(K) for j in range(i + 1, K)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance criteria report: test_acceptance.py records (number, title, passed, detail) tuples here
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
