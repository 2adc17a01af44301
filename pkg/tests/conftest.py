import numpy as np
import pytest

from rapidgnn import build_csr, synth_powerlaw


@pytest.fixture(scope="session")
def synth():
    """The 2000-node long-tail graph used throughout (graph, features, labels)."""
    return synth_powerlaw(2000, 10, 2.1, 32, 4, seed=7)


@pytest.fixture
def path_graph():
    return build_csr([(0, 1), (1, 2)], 3)


def random_edges(n, m, seed):
    rng = np.random.default_rng(seed)
    return [tuple(map(int, e)) for e in rng.integers(0, n, size=(m, 2))]


def adjacency_sets(edges, n, symmetrize=True):
    adj = [set() for _ in range(n)]
    for u, v in edges:
        adj[u].add(v)
        if symmetrize:
            adj[v].add(u)
    return adj


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
