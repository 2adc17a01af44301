"""CSR graph storage, partition-local views and a long-tail synthetic generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_DTYPE = np.float32
FEATURE_BYTES = 4


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Graph:
    """Immutable CSR adjacency.

    Neighbor lists are sorted ascending and free of duplicates.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    undirected: bool = True

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.shape[0])

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return neighbors(self, v)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the stored (src, dst) pairs in CSR order."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return src, self.col_indices.copy()


@dataclass(frozen=True)
class Labels:
    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.values.size and (self.values.min() < 0 or self.values.max() >= self.num_classes):
            raise ValueError("label value outside [0, num_classes)")


@dataclass(frozen=True)
class LocalPartition:
    worker: int
    owned: np.ndarray
    halo: np.ndarray


def build_csr(edges, num_nodes: int, symmetrize: bool = True) -> Graph:
    """Build a CSR graph from ``(u, v)`` pairs.

    Self loops are kept, duplicate edges are dropped.
    """
    num_nodes = int(num_nodes)
    if num_nodes < 0:
        raise ValueError("num_nodes must be non-negative")
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src, dst = arr[:, 0], arr[:, 1]
    bad = np.flatnonzero((src < 0) | (src >= num_nodes) | (dst < 0) | (dst >= num_nodes))
    if bad.size:
        k = int(bad[0])
        raise ValueError(
            f"edge {k} ({int(src[k])}, {int(dst[k])}) has an endpoint outside [0, {num_nodes})"
        )
    if symmetrize:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    # unique over the combined key sorts by (src, dst)
    key = np.unique(src * max(num_nodes, 1) + dst)
    src = key // max(num_nodes, 1)
    dst = key % max(num_nodes, 1)
    counts = np.bincount(src, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Graph(num_nodes, _frozen(offsets), _frozen(dst.astype(np.int64)), bool(symmetrize))


def neighbors(g: Graph, v: int) -> np.ndarray:
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range [0, {g.num_nodes})")
    return g.col_indices[g.row_offsets[v] : g.row_offsets[v + 1]]


def induce_partition(g: Graph, pm, worker: int) -> LocalPartition:
    """Owned nodes of ``worker`` plus their one-hop halo.

    ``pm`` is a :class:`~rapidgnn.partition.PartitionMap` or a plain
    node -> worker array (in which case the worker count is ``max + 1``).
    """
    assignment = np.asarray(getattr(pm, "assignment", pm))
    if assignment.shape[0] != g.num_nodes:
        raise ValueError("partition map does not cover the graph")
    num_workers = getattr(pm, "num_workers", int(assignment.max(initial=-1)) + 1)
    if not 0 <= worker < num_workers:
        raise ValueError(f"unknown worker id {worker} (have {num_workers} workers)")
    owned = np.flatnonzero(assignment == worker)
    src, dst = g.edges()
    reach = np.unique(dst[assignment[src] == worker])
    halo = reach[assignment[reach] != worker]
    return LocalPartition(worker, _frozen(owned.astype(np.int64)), _frozen(halo.astype(np.int64)))


def read_edge_list(path, num_nodes: int | None = None, symmetrize: bool = True) -> Graph:
    """Load whitespace-separated ``u v`` lines; ``#`` starts a comment."""
    path = Path(path)
    with path.open() as fh:
        rows = [line.split("#", 1)[0].split() for line in fh]
    pairs = [(int(r[0]), int(r[1])) for r in rows if r]
    if num_nodes is None:
        num_nodes = 1 + max((max(p) for p in pairs), default=-1)
    return build_csr(pairs, num_nodes, symmetrize=symmetrize)


def synth_powerlaw(
    num_nodes: int,
    avg_degree: int,
    exponent: float,
    dim: int,
    num_classes: int,
    seed: int,
    homophily: float = 0.7,
    separation: float = 1.0,
) -> tuple[Graph, np.ndarray, Labels]:
    """Heavy-tailed undirected graph with class-conditioned Gaussian features.

    Edges follow a Chung-Lu expected-degree model with weights
    ``w_k ~ (k + 1) ** (-1 / (exponent - 1))`` so the degree tail decays with
    the requested exponent. With probability ``homophily`` an edge's second
    endpoint is drawn from the first endpoint's class, which gives both the
    partitioner and the classifier some structure to exploit.
    """
    if num_nodes < 2:
        raise ValueError("num_nodes must be >= 2")
    if exponent <= 1:
        raise ValueError("exponent must be > 1")
    if avg_degree < 1 or dim < 1 or num_classes < 1:
        raise ValueError("avg_degree, dim and num_classes must be >= 1")
    if not 0.0 <= homophily <= 1.0:
        raise ValueError("homophily must lie in [0, 1]")

    rng = np.random.default_rng(np.uint64(seed))
    n = num_nodes
    labels = rng.integers(0, num_classes, size=n)

    weights = (np.arange(n) + 1.0) ** (-1.0 / (exponent - 1.0))
    weights = weights[rng.permutation(n)]
    p = weights / weights.sum()

    m = n * avg_degree // 2
    u = rng.choice(n, size=m, p=p)
    v = rng.choice(n, size=m, p=p)
    same = rng.random(m) < homophily
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        pick = same & (labels[u] == c)
        k = int(pick.sum())
        if k and members.size:
            pc = weights[members] / weights[members].sum()
            v[pick] = members[rng.choice(members.size, size=k, p=pc)]
    keep = u != v
    g = build_csr(np.stack([u[keep], v[keep]], axis=1), n, symmetrize=True)

    centers = rng.standard_normal((num_classes, dim)) * separation
    feats = centers[labels] + rng.standard_normal((n, dim))
    feats = _frozen(feats.astype(FEATURE_DTYPE))
    return g, feats, Labels(_frozen(labels.astype(np.int64)), num_classes)
