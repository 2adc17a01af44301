"""Steady/secondary remote-feature caches and the bounded rolling prefetcher.

Per worker there is one trainer, one prefetcher thread and one secondary-cache
builder thread. The steady cache is read-shared and immutable; the only
mutation is :meth:`CacheBuffers.swap`, which replaces the reference in one
step so a reader holding a snapshot always sees a whole cache.

Resident feature rows (both cache buffers plus every queue slot, counted from
the moment the slot is reserved until the trainer takes the batch) are
tracked by a :class:`ResidentMeter` so the ``2 * n_hot + Q * m_max`` bound can
be asserted.
"""
from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .graph import FEATURE_DTYPE
from .kv import FeatureStore, NetworkModel, TransferStats, local_lookup, sync_pull, vector_pull
from .sampler import BatchMeta
from .schedule import compute_frequency, select_hot

logger = logging.getLogger(__name__)

SRC_LOCAL, SRC_CACHE, SRC_SYNCPULL = 0, 1, 2


class ResidentMeter:
    """Thread-safe count of device-resident feature rows with a high-water mark."""

    def __init__(self):
        self._lock = threading.Lock()
        self.rows = 0
        self.high_water = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.rows += n
            self.high_water = max(self.high_water, self.rows)

    def release(self, n: int) -> None:
        with self._lock:
            self.rows -= n
            assert self.rows >= 0, "released more rows than were resident"


@dataclass(frozen=True)
class SteadyCache:
    ids: np.ndarray
    rows: np.ndarray
    epoch_tag: int
    capacity: int

    def __len__(self):
        return int(self.ids.size)

    @classmethod
    def empty(cls, dim: int, epoch_tag: int = 0, capacity: int = 0) -> "SteadyCache":
        return cls(np.empty(0, np.int64), np.empty((0, dim), FEATURE_DTYPE), epoch_tag, capacity)

    def contains(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if self.ids.size == 0:
            return np.zeros(ids.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.ids, ids), self.ids.size - 1)
        return self.ids[pos] == ids


def build_cache(
    hot,
    store: FeatureStore,
    net: NetworkModel,
    worker: int,
    epoch_tag: int = 0,
    capacity: int | None = None,
) -> tuple[SteadyCache, TransferStats]:
    """Materialise ``hot`` with a single vector pull.

    A failed pull yields an empty cache and a warning; training then simply
    runs without cache hits.
    """
    hot = np.sort(np.asarray(hot, dtype=np.int64))
    capacity = hot.size if capacity is None else capacity
    if hot.size > capacity:
        raise ValueError(f"hot set of {hot.size} exceeds cache capacity {capacity}")
    try:
        rows, stats = vector_pull(store, hot, net, worker, kind="build")
    except Exception as exc:  # degrade to the uncached path
        logger.warning("cache build for worker %d failed: %s; continuing without cache", worker, exc)
        return SteadyCache.empty(store.dim, epoch_tag, capacity), TransferStats()
    rows.setflags(write=False)
    hot.setflags(write=False)
    return SteadyCache(hot, rows, epoch_tag, capacity), stats


def cache_get(c: SteadyCache, ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(hit_mask, hit_rows, miss_ids)`` for ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    hit = c.contains(ids)
    rows = c.rows[np.searchsorted(c.ids, ids[hit])]
    return hit, rows, ids[~hit]


class SecondaryCache:
    """Handle to a cache being built for the next epoch."""

    def __init__(self, epoch_tag: int):
        self.epoch_tag = epoch_tag
        self.ready = threading.Event()
        self.cache: SteadyCache | None = None
        self.hot: np.ndarray | None = None
        self.stats = TransferStats()
        self.error: BaseException | None = None
        self._thread: threading.Thread | None = None

    def is_ready(self) -> bool:
        return self.ready.is_set()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)


def _fill_secondary(handle, blocks, store, net, worker, n_hot, meter, hot_override):
    try:
        if hot_override is not None:
            hot = np.asarray(hot_override, dtype=np.int64)
        else:
            hot = select_hot(compute_frequency(blocks), n_hot)
        if meter is not None:
            meter.add(hot.size)
        cache, stats = build_cache(hot, store, net, worker, handle.epoch_tag, capacity=n_hot)
        if meter is not None and len(cache) != hot.size:
            meter.release(hot.size - len(cache))
        handle.hot, handle.cache, handle.stats = hot, cache, stats
        handle.ready.set()
    except BaseException as exc:  # noqa: BLE001 - the old cache stays in service
        handle.error = exc
        logger.warning("secondary cache for epoch %d failed: %s", handle.epoch_tag, exc)


def build_secondary(
    blocks: Iterable[BatchMeta],
    store: FeatureStore,
    net: NetworkModel,
    worker: int,
    n_hot: int,
    epoch_tag: int,
    meter: ResidentMeter | None = None,
    background: bool = True,
    hot_override=None,
) -> SecondaryCache:
    """Rank next epoch's remote accesses and pull the new hot set.

    With ``background`` the work runs on a daemon thread and the returned
    handle becomes ready when the pull completes.
    """
    handle = SecondaryCache(epoch_tag)
    args = (handle, blocks, store, net, worker, n_hot, meter, hot_override)
    if background:
        t = threading.Thread(target=_fill_secondary, args=args, name=f"csec-w{worker}", daemon=True)
        handle._thread = t
        t.start()
    else:
        _fill_secondary(*args)
    return handle


class CacheBuffers:
    """Double buffer: readers take :meth:`current` snapshots, the epoch boundary swaps."""

    def __init__(self, primary: SteadyCache, meter: ResidentMeter | None = None):
        self._lock = threading.Lock()
        self._primary = primary
        self.meter = meter

    def current(self) -> SteadyCache:
        with self._lock:
            return self._primary

    def swap(self, secondary: SecondaryCache | None) -> bool:
        """Install ``secondary`` if it is ready; otherwise keep the current cache."""
        if secondary is None or not secondary.is_ready() or secondary.cache is None:
            return False
        with self._lock:
            old, self._primary = self._primary, secondary.cache
        if self.meter is not None:
            self.meter.release(len(old))
        return True

    def discard(self, secondary: SecondaryCache | None) -> None:
        """Drop an unused secondary buffer (after the builder finished)."""
        if secondary is not None and secondary.cache is not None and self.meter is not None:
            self.meter.release(len(secondary.cache))
            secondary.cache = None


@dataclass
class StagedBatch:
    meta: BatchMeta
    input_rows: np.ndarray
    miss_count: int
    source_tags: np.ndarray
    stats: TransferStats = field(default_factory=TransferStats)

    @property
    def index(self) -> int:
        return self.meta.index


def stage_batch(
    meta: BatchMeta,
    cache: SteadyCache,
    store: FeatureStore,
    net: NetworkModel,
    worker: int,
) -> StagedBatch:
    """Assemble all input rows of ``meta``: local shard, then cache, then a sync pull."""
    ids = meta.input_nodes
    rows = np.empty((ids.size, store.dim), dtype=FEATURE_DTYPE)
    tags = np.empty(ids.size, dtype=np.uint8)

    found, local_rows, rest = local_lookup(store.shard(worker), ids)
    rows[found] = local_rows
    tags[found] = SRC_LOCAL
    rest_pos = np.flatnonzero(~found)

    hit, hit_rows, miss = cache_get(cache, rest)
    rows[rest_pos[hit]] = hit_rows
    tags[rest_pos[hit]] = SRC_CACHE

    miss_rows, stats = sync_pull(store, miss, net, worker, kind="step")
    rows[rest_pos[~hit]] = miss_rows
    tags[rest_pos[~hit]] = SRC_SYNCPULL
    return StagedBatch(meta, rows, int(miss.size), tags, stats)


class PrefetchQueue:
    """Bounded FIFO of staged batches for one producer and one consumer.

    A slot is reserved (and its rows charged to the meter) before staging
    starts, so ``len(entries) + reserved <= capacity`` always holds. Batch
    indices are claimed in order by whichever side fetches them first; a batch
    the trainer claims is never staged by the prefetcher.
    """

    def __init__(self, capacity: int, meter: ResidentMeter | None = None):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.meter = meter or ResidentMeter()
        self._cond = threading.Condition()
        self._entries: deque = deque()
        self._reserved: dict[int, int] = {}
        self._claimed = -1
        self._next_take = 0
        self._closed = False
        self.max_depth = 0
        self.fallbacks = 0

    def __len__(self):
        with self._cond:
            return len(self._entries)

    @property
    def closed(self) -> bool:
        return self._closed

    def reset(self) -> None:
        with self._cond:
            if self._entries or self._reserved:
                raise RuntimeError("queue must be drained before it is reset")
            self._claimed = -1
            self._next_take = 0
            self._closed = False

    # producer side
    def reserve(self, index: int, rows: int) -> bool:
        """Block until a slot is free, then claim ``index``.

        Returns False when the trainer already claimed ``index`` or the queue
        was closed; no slot is held in that case.
        """
        with self._cond:
            while not self._closed and len(self._entries) + len(self._reserved) >= self.capacity:
                self._cond.wait()
            if self._closed or self._claimed >= index:
                return False
            self._claimed = index
            self._reserved[index] = rows
            self.meter.add(rows)
            self.max_depth = max(self.max_depth, len(self._entries) + len(self._reserved))
            return True

    def put(self, staged: StagedBatch | None, index: int) -> None:
        """Publish a staged batch, or ``None`` to mark ``index`` as unstaged."""
        with self._cond:
            rows = self._reserved.pop(index)
            if staged is None:
                self.meter.release(rows)
            self._entries.append((index, staged, rows))
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # consumer side
    def take(self, index: int) -> StagedBatch | None:
        """Return the staged batch ``index`` or ``None`` meaning "fall back".

        Waits if the prefetcher is currently staging ``index``.
        """
        with self._cond:
            if index != self._next_take:
                raise ValueError(f"batches must be taken in order: expected {self._next_take}, got {index}")
            while True:
                if self._entries and self._entries[0][0] == index:
                    _, staged, rows = self._entries.popleft()
                    if staged is not None:
                        self.meter.release(rows)
                    break
                if self._claimed >= index:
                    self._cond.wait()
                    continue
                self._claimed = index
                staged = None
                break
            self._next_take = index + 1
            if staged is None:
                self.fallbacks += 1
            self._cond.notify_all()
            return staged


def take_batch(queue: PrefetchQueue, index: int) -> StagedBatch | None:
    return queue.take(index)


def prefetch_loop(
    cursor: Iterable[BatchMeta],
    buffers: CacheBuffers,
    store: FeatureStore,
    net: NetworkModel,
    queue: PrefetchQueue,
    worker: int,
) -> int:
    """Stage every batch of ``cursor`` into ``queue``; returns the number staged."""
    staged_count = 0
    for meta in cursor:
        if not queue.reserve(meta.index, int(meta.input_nodes.size)):
            if queue.closed:
                break
            continue
        try:
            staged = stage_batch(meta, buffers.current(), store, net, worker)
        except Exception as exc:  # noqa: BLE001 - trainer falls back for this batch
            logger.warning("staging batch %d failed: %s", meta.index, exc)
            staged = None
        queue.put(staged, meta.index)
        staged_count += staged is not None
    return staged_count


class Prefetcher:
    """Runs :func:`prefetch_loop` on a background thread."""

    def __init__(self, cursor, buffers, store, net, queue, worker):
        self.queue = queue
        self.staged = 0
        self._args = (cursor, buffers, store, net, queue, worker)
        self._thread = threading.Thread(target=self._run, name=f"prefetch-w{worker}", daemon=True)

    def _run(self):
        self.staged = prefetch_loop(*self._args)

    def start(self) -> "Prefetcher":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.queue.close()
        self._thread.join()
