"""Per-worker data paths driven by the experiment loop.

Each engine hands the trainer one assembled batch per step and keeps the
per-epoch counters. Two clocks are supported:

``sim``
    Deterministic and single threaded. Costs come from the network model
    (pull waits) and the caller's compute estimate; the prefetcher timeline
    is reconstructed exactly: batch ``i`` starts staging at
    ``max(finish[i-1], take[i-Q])`` and the trainer stalls until it is done.
``wall``
    Real threads (prefetcher, secondary-cache builder) and real sleeps for
    the simulated network waits; times are measured with ``perf_counter``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cache import (
    SRC_CACHE,
    CacheBuffers,
    Prefetcher,
    PrefetchQueue,
    ResidentMeter,
    SteadyCache,
    build_cache,
    build_secondary,
    stage_batch,
)
from .kv import FeatureStore, NetworkModel, TransferStats
from .sampler import OnlineSampler, derive_seed, num_batches, schedule_batches
from .schedule import compute_frequency, select_hot, stream_blocks


@dataclass
class BatchRecord:
    epoch: int
    worker: int
    index: int
    input_size: int
    remote_inputs: int
    cache_hits: int
    charged: int
    pulls: int
    bytes: int
    wait: float
    fallback: bool
    miss_ids: np.ndarray | None = None


@dataclass
class EpochCounters:
    stats: TransferStats = field(default_factory=TransferStats)
    fallbacks: int = 0
    batches: int = 0
    staged: int = 0
    remote_inputs: int = 0
    cache_hits: int = 0
    stall: float = 0.0
    compute: float = 0.0
    peak_rows: int = 0
    swapped: bool = False
    build_bytes: int = 0


class _EngineBase:
    mode = "?"

    def __init__(self, worker: int, store: FeatureStore, net: NetworkModel, clock: str,
                 keep_miss_ids: bool = False):
        if clock not in ("sim", "wall"):
            raise ValueError(f"unknown clock {clock!r}")
        self.worker = worker
        self.store = store
        self.net = net
        self.clock = clock
        self.keep_miss_ids = keep_miss_ids
        self.records: list[BatchRecord] = []
        self.counters = EpochCounters()
        self.epoch = -1

    def _record(self, staged, fallback: bool, from_queue: bool | None = None) -> None:
        meta = staged.meta
        remote = int((~meta.locality).sum())
        hits = int((staged.source_tags == SRC_CACHE).sum())
        c = self.counters
        c.stats += staged.stats
        c.batches += 1
        c.remote_inputs += remote
        c.cache_hits += hits
        c.fallbacks += fallback
        c.staged += (not fallback) if from_queue is None else from_queue
        miss = None
        if self.keep_miss_ids:
            miss = meta.input_nodes[staged.source_tags == 2]
        self.records.append(BatchRecord(
            meta.epoch, self.worker, meta.index, int(meta.input_nodes.size), remote, hits,
            staged.miss_count, staged.stats.pulls, staged.stats.bytes, staged.stats.simulated_wait,
            fallback, miss,
        ))

    def add_compute(self, seconds: float) -> None:
        self.counters.compute += seconds


class RapidEngine(_EngineBase):
    """Scheduled data path: steady cache, secondary cache and rolling prefetch."""

    mode = "rapidgnn"

    def __init__(self, worker, store, net, clock, block_path, batch_counts, n_hot, queue_depth,
                 m_max, freq_scope="epoch", prefetch=True, hot_delta=0, keep_miss_ids=False):
        super().__init__(worker, store, net, clock, keep_miss_ids)
        self.block_path = block_path
        self.batch_counts = batch_counts
        self.n_hot = n_hot
        self.q = queue_depth
        self.m_max = m_max
        self.freq_scope = freq_scope
        self.prefetch = prefetch
        self.hot_delta = hot_delta  # test hook: perturbs the cached hot-set size
        self.meter = ResidentMeter()
        self.buffers: CacheBuffers | None = None
        self.hot_sets: dict[int, np.ndarray] = {}
        self.setup_stats = TransferStats()
        self.setup_time = 0.0
        self._run_hot = None

    @property
    def memory_bound(self) -> int:
        return 2 * self.n_hot + self.q * self.m_max

    def num_batches(self, epoch: int) -> int:
        return self.batch_counts[epoch]

    def _hot_for(self, epoch: int) -> np.ndarray:
        size = max(self.n_hot + self.hot_delta, 0)
        if self.freq_scope == "run":
            if self._run_hot is None:
                self._run_hot = select_hot(compute_frequency(stream_blocks(self.block_path)), size)
            return self._run_hot
        return select_hot(compute_frequency(stream_blocks(self.block_path, epoch=epoch)), size)

    def setup(self) -> float:
        """Initial hot set from the first epoch and its one-shot vector pull."""
        t0 = time.perf_counter()
        hot = self._hot_for(0) if self.batch_counts else np.empty(0, np.int64)
        self.meter.add(hot.size)
        cache, stats = build_cache(hot, self.store, self.net, self.worker, epoch_tag=0,
                                   capacity=max(self.n_hot, hot.size))
        if len(cache) != hot.size:
            self.meter.release(hot.size - len(cache))
        self.hot_sets[0] = cache.ids
        self.buffers = CacheBuffers(cache, self.meter)
        self.setup_stats = stats
        self.setup_time = stats.simulated_wait if self.clock == "sim" else time.perf_counter() - t0
        return self.setup_time

    # epoch lifecycle
    def begin_epoch(self, epoch: int, t0: float) -> None:
        self.epoch = epoch
        self.counters = EpochCounters()
        self.t0 = t0
        self._secondary = None
        last = epoch + 1 >= len(self.batch_counts)
        if not last:
            override = self._hot_for(epoch + 1) if self.freq_scope == "run" or self.hot_delta else None
            blocks = stream_blocks(self.block_path, epoch=epoch + 1)
            self._secondary = build_secondary(
                blocks, self.store, self.net, self.worker, max(self.n_hot, 0), epoch + 1,
                meter=self.meter, background=self.clock == "wall", hot_override=override,
            )
        cursor = stream_blocks(self.block_path, epoch=epoch)
        if self.clock == "sim":
            self._cursor = iter(cursor)
            self._finish: list[float] = []
            self._take: list[float] = []
            self._start: list[float] = []
            self._rows: list[int] = []
            self._staged: list = []
            self._pf_free = t0
        else:
            self.queue = PrefetchQueue(self.q, self.meter)
            self._prefetcher = None
            if self.prefetch:
                self._prefetcher = Prefetcher(cursor, self.buffers, self.store, self.net,
                                              self.queue, self.worker).start()

    def _sim_stage_through(self, index: int) -> None:
        cache = self.buffers.current()
        while len(self._staged) <= index:
            j = len(self._staged)
            meta = next(self._cursor)
            start = self._pf_free
            if j >= self.q:
                start = max(start, self._take[j - self.q])
            staged = stage_batch(meta, cache, self.store, self.net, self.worker)
            finish = start + staged.stats.simulated_wait
            self._staged.append(staged)
            self._start.append(start)
            self._finish.append(finish)
            self._rows.append(int(meta.input_nodes.size))
            self._pf_free = finish

    def fetch(self, index: int, t: float):
        """Batch ``index`` for the trainer arriving at time ``t``; returns (staged, ready_time)."""
        if self.clock == "sim":
            if not self.prefetch:
                meta = next(self._cursor)
                staged = stage_batch(meta, self.buffers.current(), self.store, self.net, self.worker)
                ready = t + staged.stats.simulated_wait
                self._record(staged, fallback=True)
                self.counters.stall += ready - t
                return staged, ready
            self._sim_stage_through(index)
            staged = self._staged[index]
            self._staged[index] = None
            ready = max(t, self._finish[index])
            self._take.append(ready)
            self._record(staged, fallback=False)
            self.counters.stall += ready - t
            return staged, ready

        t_call = time.perf_counter()
        staged = self.queue.take(index)
        fallback = staged is None
        if fallback:
            meta = self._fallback_meta(index)
            staged = stage_batch(meta, self.buffers.current(), self.store, self.net, self.worker)
        ready = time.perf_counter()
        self._record(staged, fallback)
        self.counters.stall += ready - t_call
        return staged, ready

    def _fallback_meta(self, index: int):
        # default path reads the batch's metadata from its own cursor
        if getattr(self, "_fb_cursor", None) is None or self._fb_epoch != self.epoch:
            self._fb_cursor = iter(stream_blocks(self.block_path, epoch=self.epoch))
            self._fb_epoch = self.epoch
            self._fb_pos = -1
        for meta in self._fb_cursor:
            self._fb_pos = meta.index
            if meta.index == index:
                return meta
        raise LookupError(f"batch {index} missing from epoch {self.epoch}")

    def end_epoch(self, t_end: float) -> EpochCounters:
        c = self.counters
        if self.clock == "sim":
            # queue slot of batch i is resident over [start_i, take_i)
            events = sorted(
                [(s, 1, r) for s, r in zip(self._start, self._rows)]
                + [(tk, 0, -r) for tk, r in zip(self._take, self._rows)]
            )
            cur = peak_q = 0
            for _, _, r in events:
                cur += r
                peak_q = max(peak_q, cur)
            cache_rows = len(self.buffers.current())
            sec = self._secondary
            if sec is not None and sec.cache is not None:
                cache_rows += len(sec.cache)
            c.peak_rows = cache_rows + peak_q
            self.meter.high_water = max(self.meter.high_water, c.peak_rows)
            ready = sec is not None and sec.is_ready() and self.t0 + sec.stats.simulated_wait <= t_end
        else:
            if self._prefetcher is not None:
                self._prefetcher.stop()
            sec = self._secondary
            ready = sec is not None and sec.is_ready()
            c.peak_rows = self.meter.high_water
        if sec is not None:
            c.build_bytes = sec.stats.bytes
            if ready and self.buffers.swap(sec):
                c.swapped = True
                self.hot_sets[self.epoch + 1] = sec.cache.ids
            else:
                sec.join()
                self.buffers.discard(sec)
                self.hot_sets[self.epoch + 1] = self.buffers.current().ids
        return c


class BaselineEngine(_EngineBase):
    """On-demand path: every remote input row is pulled synchronously per batch."""

    mode = "baseline"

    def __init__(self, worker, store, net, clock, graph, train_nodes, batch_size, fanout, s0,
                 sampling="schedule", keep_miss_ids=False):
        super().__init__(worker, store, net, clock, keep_miss_ids)
        self.graph = graph
        self.train_nodes = np.asarray(train_nodes, dtype=np.int64)
        self.batch_size = batch_size
        self.fanout = fanout
        self.s0 = s0
        self.sampling = sampling
        self.local_mask = store.local_mask(worker)
        self._empty = SteadyCache.empty(store.dim)
        if sampling == "online":
            self._online = OnlineSampler(graph, fanout, derive_seed(s0, worker, 0, 1 << 33))
        elif sampling != "schedule":
            raise ValueError(f"unknown sampling {sampling!r}")
        self.setup_time = 0.0
        self.setup_stats = TransferStats()
        self.meter = ResidentMeter()
        self.memory_bound = 0

    def num_batches(self, epoch: int) -> int:
        return num_batches(self.train_nodes.size, self.batch_size)

    def setup(self) -> float:
        return 0.0

    def begin_epoch(self, epoch: int, t0: float) -> None:
        self.epoch = epoch
        self.counters = EpochCounters()
        if self.sampling == "schedule":
            self._batches = schedule_batches(self.graph, self.train_nodes, self.batch_size, self.fanout,
                                             self.s0, self.worker, epoch, self.local_mask)
        else:
            order = self._online.epoch_order(self.train_nodes)
            self._batches = self._online_batches(order, epoch)

    def _online_batches(self, order, epoch):
        for i in range(num_batches(order.size, self.batch_size)):
            meta = self._online.sample(order[i * self.batch_size : (i + 1) * self.batch_size], epoch, i)
            meta.locality = self.local_mask[meta.input_nodes]
            yield meta

    def fetch(self, index: int, t: float):
        t_call = time.perf_counter()
        meta = next(self._batches)
        staged = stage_batch(meta, self._empty, self.store, self.net, self.worker)
        self._record(staged, fallback=False, from_queue=False)
        if self.clock == "sim":
            ready = t + staged.stats.simulated_wait
            self.counters.stall += ready - t
        else:
            ready = time.perf_counter()
            self.counters.stall += ready - t_call
        self.counters.peak_rows = max(self.counters.peak_rows, int(meta.input_nodes.size))
        return staged, ready

    def end_epoch(self, t_end: float) -> EpochCounters:
        return self.counters
