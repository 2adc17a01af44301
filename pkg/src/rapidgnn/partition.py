"""Node -> worker assignment: random baseline and a greedy edge-cut partitioner.

The greedy partitioner grows ``P`` BFS regions from spread-out seeds and then
runs one boundary refinement pass. It is a desk-scale stand-in for METIS: it
keeps the locality-aware vs. random contrast without multilevel coarsening.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph

PM_MAGIC = b"RGPM"


@dataclass(frozen=True)
class PartitionMap:
    assignment: np.ndarray
    num_workers: int
    # allowed deviation of the largest part above ceil(n / P)
    slack: int = 0

    def __post_init__(self):
        a = self.assignment
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if a.size and (a.min() < 0 or a.max() >= self.num_workers):
            raise ValueError("worker id outside [0, num_workers)")

    @property
    def num_nodes(self) -> int:
        return int(self.assignment.shape[0])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_workers)

    def owned(self, worker: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == worker)

    def is_balanced(self) -> bool:
        n, p = self.num_nodes, self.num_workers
        s = self.sizes()
        if n == 0:
            return True
        return s.max() - s.min() <= math.ceil(n / p) - n // p + self.slack

    def __getitem__(self, v):
        return self.assignment[v]


def _freeze(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.setflags(write=False)
    return a


def random_partition(num_nodes: int, num_workers: int, seed: int) -> PartitionMap:
    """Shuffled round-robin assignment; part sizes differ by at most one."""
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    rng = np.random.default_rng(np.uint64(seed))
    order = rng.permutation(num_nodes)
    assignment = np.empty(num_nodes, dtype=np.int64)
    assignment[order] = np.arange(num_nodes) % num_workers
    return PartitionMap(_freeze(assignment), num_workers)


def edge_cut(g: Graph, pm) -> int:
    """Number of distinct undirected edges whose endpoints sit on different workers."""
    a = np.asarray(getattr(pm, "assignment", pm))
    src, dst = g.edges()
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    cross = a[lo] != a[hi]
    pairs = np.unique(lo[cross] * max(g.num_nodes, 1) + hi[cross])
    return int(pairs.size)


def _bfs_dist(g: Graph, sources) -> np.ndarray:
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    off, col = g.row_offsets, g.col_indices
    while q:
        u = q.popleft()
        for v in col[off[u] : off[u + 1]]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _spread_seeds(g: Graph, p: int) -> list[int]:
    deg = g.degrees()
    seeds = [int(np.argmax(deg))]
    while len(seeds) < p:
        dist = _bfs_dist(g, seeds)
        # unreachable nodes are the farthest of all
        score = np.where(dist < 0, np.iinfo(np.int64).max, dist)
        score[seeds] = -1
        seeds.append(int(np.argmax(score)))
    return seeds


def greedy_edgecut_partition(g: Graph, num_workers: int, imbalance: float = 0.05,
                             refine: bool = True) -> PartitionMap:
    """BFS-grow ``num_workers`` regions, then one greedy refinement pass.

    Regions grow one node per turn in round-robin order, capped at
    ``ceil(n / P)``. A region whose frontier dries up restarts from the
    lowest-id unassigned node. Refinement visits boundary nodes in ascending
    id and moves a node to the neighboring part with the largest strictly
    positive cut gain, provided the target stays under
    ``ceil((1 + imbalance) * n / P)`` and the source stays over
    ``floor((1 - imbalance) * n / P)``. The declared slack is the widest
    spread those two bounds allow beyond the ideal one.
    """
    n, p = g.num_nodes, num_workers
    if p < 1:
        raise ValueError("num_workers must be >= 1")
    if imbalance < 0:
        raise ValueError("imbalance must be >= 0")
    if p > n:
        raise ValueError(f"cannot balance {n} nodes over {p} workers")

    cap = math.ceil(n / p)
    a = np.full(n, -1, dtype=np.int64)
    sizes = [0] * p
    fronts = [deque() for _ in range(p)]
    for w, s in enumerate(_spread_seeds(g, p)):
        a[s] = w
        sizes[w] = 1
        fronts[w].append(s)
    remaining = n - p
    off, col = g.row_offsets, g.col_indices
    next_free = 0
    while remaining:
        progressed = False
        for w in range(p):
            if sizes[w] >= cap or not remaining:
                continue
            claimed = False
            while fronts[w] and not claimed:
                u = fronts[w][0]
                nb = col[off[u] : off[u + 1]]
                free = nb[a[nb] < 0]
                if free.size == 0:
                    fronts[w].popleft()
                    continue
                v = int(free[0])
                a[v] = w
                fronts[w].append(v)
                claimed = True
            if not claimed:
                while a[next_free] >= 0:
                    next_free += 1
                v = next_free
                a[v] = w
                fronts[w].append(v)
            sizes[w] += 1
            remaining -= 1
            progressed = True
        if not progressed:  # pragma: no cover - cap * p >= n makes this unreachable
            raise RuntimeError("region growing stalled")

    hi = math.ceil((1.0 + imbalance) * n / p)
    lo = math.floor((1.0 - imbalance) * n / p)
    size_arr = np.bincount(a, minlength=p)
    for u in range(n if refine else 0):
        nb = col[off[u] : off[u + 1]]
        nb = nb[nb != u]
        if nb.size == 0:
            continue
        parts = a[nb]
        here = a[u]
        if np.all(parts == here):
            continue
        counts = np.bincount(parts, minlength=p)
        gains = counts - counts[here]
        gains[here] = 0
        best = int(np.argmax(gains))  # lowest part id on ties
        if gains[best] > 0 and size_arr[best] + 1 <= hi and size_arr[here] - 1 >= lo:
            a[u] = best
            size_arr[best] += 1
            size_arr[here] -= 1

    slack = max(0, hi - cap) + max(0, n // p - lo)
    return PartitionMap(_freeze(a), p, slack=slack)


def save_partition(pm: PartitionMap, path) -> None:
    """Write ``RGPM`` magic, u32 P, then one u32 worker id per node (little-endian)."""
    with Path(path).open("wb") as fh:
        fh.write(PM_MAGIC)
        fh.write(struct.pack("<I", pm.num_workers))
        fh.write(pm.assignment.astype("<u4").tobytes())


def load_partition(path) -> PartitionMap:
    raw = Path(path).read_bytes()
    if raw[:4] != PM_MAGIC:
        raise ValueError("not a partition map file (bad magic)")
    if len(raw) < 8 or (len(raw) - 8) % 4:
        raise ValueError("truncated partition map file")
    (p,) = struct.unpack_from("<I", raw, 4)
    a = np.frombuffer(raw, dtype="<u4", offset=8).astype(np.int64)
    n = a.size
    sizes = np.bincount(a, minlength=p)
    if p < 1:
        raise ValueError("partition map file declares zero workers")
    slack = 0
    if n:
        slack = max(0, int(sizes.max()) - math.ceil(n / p)) + max(0, n // p - int(sizes.min()))
    return PartitionMap(_freeze(a), p, slack=slack)
