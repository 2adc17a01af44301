"""Sharded feature store with a simulated network.

Every remote pull is charged ``per_pull_latency + bytes / bandwidth`` per
owning worker, and bytes are always ``rows * dim * 4``.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .graph import FEATURE_BYTES, FEATURE_DTYPE


@dataclass(frozen=True)
class NetworkModel:
    per_pull_latency: float = 0.0
    bandwidth: float = 1.25e9
    enabled: bool = True
    sleep: bool = False  # block the caller for the simulated wait

    def __post_init__(self):
        if self.per_pull_latency < 0:
            raise ValueError("latency must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")

    def cost(self, nbytes: int) -> float:
        if not self.enabled:
            return 0.0
        return self.per_pull_latency + nbytes / self.bandwidth


@dataclass
class TransferStats:
    pulls: int = 0
    remote_nodes: int = 0
    bytes: int = 0
    simulated_wait: float = 0.0

    def __iadd__(self, other: "TransferStats"):
        self.pulls += other.pulls
        self.remote_nodes += other.remote_nodes
        self.bytes += other.bytes
        self.simulated_wait += other.simulated_wait
        return self

    def __add__(self, other: "TransferStats") -> "TransferStats":
        out = TransferStats(self.pulls, self.remote_nodes, self.bytes, self.simulated_wait)
        out += other
        return out


class StatsCounter:
    """Thread-safe running total of :class:`TransferStats`."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = TransferStats()

    def add(self, s: TransferStats) -> None:
        with self._lock:
            self._total += s

    def snapshot(self) -> TransferStats:
        with self._lock:
            return self._total + TransferStats()


@dataclass(frozen=True)
class FeatureShard:
    worker: int
    ids: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.shape[0] != self.ids.shape[0]:
            raise ValueError("one feature row per stored id")
        if self.ids.size > 1 and np.any(np.diff(self.ids) <= 0):
            raise ValueError("shard ids must be sorted and unique")

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def positions(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mask of ids present, their row positions)."""
        pos = np.searchsorted(self.ids, ids)
        pos_c = np.minimum(pos, max(self.ids.size - 1, 0))
        hit = (pos < self.ids.size) & (self.ids[pos_c] == ids) if self.ids.size else np.zeros(ids.shape, bool)
        return hit, pos_c[hit]


class FeatureStore:
    """All workers' shards plus the ownership map used to route pulls."""

    def __init__(self, features: np.ndarray, assignment, halo: dict[int, np.ndarray] | None = None):
        self.assignment = np.asarray(getattr(assignment, "assignment", assignment))
        self.num_workers = int(getattr(assignment, "num_workers", self.assignment.max(initial=0) + 1))
        self.dim = int(features.shape[1])
        self._features = features
        self.shards = []
        for w in range(self.num_workers):
            ids = np.flatnonzero(self.assignment == w)
            if halo and w in halo:
                ids = np.union1d(ids, halo[w])
            rows = np.ascontiguousarray(features[ids], dtype=FEATURE_DTYPE)
            rows.setflags(write=False)
            self.shards.append(FeatureShard(w, ids.astype(np.int64), rows))
        # per worker: "step" traffic (per-batch pulls) and "build" traffic (cache fills)
        self.counters = [{"step": StatsCounter(), "build": StatsCounter()} for _ in range(self.num_workers)]

    def shard(self, worker: int) -> FeatureShard:
        return self.shards[worker]

    def local_mask(self, worker: int) -> np.ndarray:
        mask = np.zeros(self.assignment.shape[0], dtype=bool)
        mask[self.shards[worker].ids] = True
        return mask

    def owners(self, ids: np.ndarray) -> np.ndarray:
        return self.assignment[ids]


def local_lookup(shard: FeatureShard, ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``ids`` into locally stored rows and missing ids.

    Returns ``(found_mask, rows_for_found, missing_ids)``; no network cost.
    """
    ids = np.asarray(ids, dtype=np.int64)
    hit, pos = shard.positions(ids)
    return hit, shard.rows[pos], ids[~hit]


def _owner_groups(store: FeatureStore, ids: np.ndarray, caller: int) -> list[tuple[int, np.ndarray]]:
    owners = store.owners(ids)
    if np.any(owners == caller):
        bad = int(ids[np.argmax(owners == caller)])
        raise ValueError(f"node {bad} is owned by the calling worker {caller}; use local_lookup")
    return [(w, np.flatnonzero(owners == w)) for w in np.unique(owners).tolist()]


def _charge(groups, dim: int, net: NetworkModel) -> TransferStats:
    stats = TransferStats()
    for _, sel in groups:
        nbytes = sel.size * dim * FEATURE_BYTES
        stats.pulls += 1
        stats.remote_nodes += sel.size
        stats.bytes += nbytes
        stats.simulated_wait += net.cost(nbytes)
    return stats


def pull_cost(store: FeatureStore, ids, net: NetworkModel, caller: int) -> TransferStats:
    """What pulling ``ids`` would be charged, without moving rows or touching counters."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return TransferStats()
    return _charge(_owner_groups(store, ids, caller), store.dim, net)


def _pull(store: FeatureStore, ids, net: NetworkModel, caller: int, kind: str) -> tuple[np.ndarray, TransferStats]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return np.empty((0, store.dim), dtype=FEATURE_DTYPE), TransferStats()
    groups = _owner_groups(store, ids, caller)
    rows = np.empty((ids.size, store.dim), dtype=FEATURE_DTYPE)
    for w, sel in groups:
        hit, pos = store.shards[w].positions(ids[sel])
        if not hit.all():  # pragma: no cover - owner shards always hold their ids
            raise KeyError("owner shard is missing a node it owns")
        rows[sel] = store.shards[w].rows[pos]
    stats = _charge(groups, store.dim, net)
    if net.sleep and stats.simulated_wait > 0:
        time.sleep(stats.simulated_wait)
    store.counters[caller][kind].add(stats)
    return rows, stats


def vector_pull(
    store: FeatureStore, ids, net: NetworkModel, caller: int, kind: str = "build"
) -> tuple[np.ndarray, TransferStats]:
    """Bulk pull of remote rows: one message per owning worker, rows in input order."""
    return _pull(store, ids, net, caller, kind)


def sync_pull(
    store: FeatureStore, ids, net: NetworkModel, caller: int, kind: str = "step"
) -> tuple[np.ndarray, TransferStats]:
    """Blocking pull of a residual miss set; an empty set is a free no-op."""
    return _pull(store, ids, net, caller, kind)
