import logging
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rapidgnn import (
    CacheBuffers,
    FeatureStore,
    NetworkModel,
    PrefetchQueue,
    Prefetcher,
    ResidentMeter,
    SteadyCache,
    build_cache,
    build_secondary,
    cache_get,
    compute_frequency,
    select_hot,
    stage_batch,
    stream_blocks,
    take_batch,
    write_blocks,
)
from rapidgnn.cache import SRC_CACHE, SRC_LOCAL, SRC_SYNCPULL, SecondaryCache, prefetch_loop
from rapidgnn.partition import greedy_edgecut_partition
from rapidgnn.sampler import enumerate_epochs

NET = NetworkModel(per_pull_latency=1e-4, bandwidth=1e9)


@pytest.fixture(scope="module")
def world(synth, tmp_path_factory):
    g, feats, _ = synth
    pm = greedy_edgecut_partition(g, 2)
    store = FeatureStore(feats, pm)
    train = pm.owned(0)[:512]
    path = tmp_path_factory.mktemp("cache") / "w0.rgmb"
    write_blocks(enumerate_epochs(g, train, 64, [10, 5], 2, 3, 0, local_mask=store.local_mask(0)),
                 path, worker=0, epochs=2)
    metas = list(stream_blocks(path, epoch=0))
    return dict(g=g, feats=feats, pm=pm, store=store, path=path, metas=metas)


def hot_for(world, n_hot, epoch=0):
    return select_hot(compute_frequency(stream_blocks(world["path"], epoch=epoch)), n_hot)


def test_empty_hot_set(world):
    c, s = build_cache(np.empty(0, np.int64), world["store"], NET, 0)
    assert len(c) == 0 and s.bytes == 0 and s.pulls == 0


def test_build_bytes_and_membership(world):
    hot = hot_for(world, 100)
    c, s = build_cache(hot, world["store"], NET, 0)
    assert s.bytes == 100 * 32 * 4
    assert c.contains(hot).all()
    hit, rows, miss = cache_get(c, hot)
    assert hit.all() and miss.size == 0
    assert np.array_equal(rows, world["feats"][hot])
    with pytest.raises(ValueError):
        c.rows[0, 0] = 0.0


def test_build_failure_degrades(world, caplog):
    own = world["pm"].owned(0)[:3]
    with caplog.at_level(logging.WARNING):
        c, s = build_cache(own, world["store"], NET, 0)
    assert len(c) == 0 and s.bytes == 0
    assert "continuing without cache" in caplog.text


def test_capacity_enforced(world):
    with pytest.raises(ValueError):
        build_cache(hot_for(world, 10), world["store"], NET, 0, capacity=5)


def test_cache_get_empty_cache():
    c = SteadyCache.empty(4)
    hit, rows, miss = cache_get(c, np.array([1, 5, 9]))
    assert not hit.any() and miss.tolist() == [1, 5, 9] and rows.shape == (0, 4)


@given(st.lists(st.integers(0, 199), unique=True), st.lists(st.integers(0, 199), unique=True))
def test_cache_get_matches_membership(cached, query):
    cached = np.array(sorted(cached), dtype=np.int64)
    rows = (cached[:, None] * np.ones((1, 3))).astype(np.float32)
    c = SteadyCache(cached, rows, 0, cached.size)
    q = np.array(sorted(query), dtype=np.int64)
    hit, got, miss = cache_get(c, q)
    members = set(cached.tolist())
    assert hit.tolist() == [v in members for v in q.tolist()]
    assert miss.tolist() == [v for v in q.tolist() if v not in members]
    assert np.array_equal(got[:, 0], q[hit].astype(np.float32))


def test_secondary_hot_set_matches_offline(world):
    blocks = stream_blocks(world["path"], epoch=1)
    h = build_secondary(blocks, world["store"], NET, 0, 128, 1, background=False)
    assert h.is_ready()
    assert np.array_equal(h.hot, hot_for(world, 128, epoch=1))
    assert np.array_equal(h.cache.ids, h.hot)
    assert h.cache.epoch_tag == 1


def test_secondary_ready_only_after_pull(world):
    slow = NetworkModel(per_pull_latency=0.3, bandwidth=1e9, sleep=True)
    h = build_secondary(stream_blocks(world["path"], epoch=1), world["store"], slow, 0, 64, 1)
    assert not h.is_ready()
    h.join()
    assert h.is_ready() and len(h.cache) == 64


def test_swap_guard_and_tag(world):
    c0, _ = build_cache(hot_for(world, 32), world["store"], NET, 0, epoch_tag=0)
    meter = ResidentMeter()
    meter.add(len(c0))
    buf = CacheBuffers(c0, meter)
    pending = SecondaryCache(1)
    assert not buf.swap(pending)
    assert not buf.swap(None)
    assert buf.current() is c0
    meter.add(32)
    ready = build_secondary(stream_blocks(world["path"], epoch=1), world["store"], NET, 0, 32, 1,
                            background=False)
    assert buf.swap(ready)
    assert buf.current().epoch_tag == 1
    assert meter.rows == 32


def test_swap_stress_readers_see_whole_caches():
    k, d = 64, 4

    def cache(tag):
        ids = np.arange(k, dtype=np.int64) + tag * k
        rows = np.full((k, d), tag, dtype=np.float32)
        return SteadyCache(ids, rows, tag, k)

    caches = [cache(t) for t in range(10_001)]
    buf = CacheBuffers(caches[0])
    stop = threading.Event()
    errors = []

    def reader():
        last = -1
        reads = 0
        while not stop.is_set() or reads == 0:
            c = buf.current()
            t = c.epoch_tag
            if not (np.all(c.rows == t) and c.ids[0] == t * k and c.ids[-1] == t * k + k - 1):
                errors.append(f"torn snapshot at tag {t}")
            if t < last:
                errors.append(f"tag went backwards {last} -> {t}")
            last = t
            reads += 1

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for tag in range(1, 10_001):
        h = SecondaryCache(tag)
        h.cache = caches[tag]
        h.ready.set()
        assert buf.swap(h)
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    assert buf.current().epoch_tag == 10_000


def oracle_miss(meta, local_mask, hot):
    hot = set(hot.tolist())
    return sorted(v for v in meta.input_nodes.tolist() if not local_mask[v] and v not in hot)


def test_stage_batch_sources_and_values(world):
    store, feats = world["store"], world["feats"]
    hot = hot_for(world, 200)
    c, _ = build_cache(hot, store, NET, 0)
    mask = store.local_mask(0)
    for meta in world["metas"]:
        sb = stage_batch(meta, c, store, NET, 0)
        assert np.array_equal(sb.input_rows, feats[meta.input_nodes])
        assert sb.miss_count == int((sb.source_tags == SRC_SYNCPULL).sum())
        assert meta.input_nodes[sb.source_tags == SRC_SYNCPULL].tolist() == oracle_miss(meta, mask, hot)
        assert np.array_equal(sb.source_tags == SRC_LOCAL, mask[meta.input_nodes])
        assert np.all(np.isin(meta.input_nodes[sb.source_tags == SRC_CACHE], hot))
        assert sb.stats.remote_nodes == sb.miss_count
        assert sb.stats.bytes == sb.miss_count * 32 * 4


def test_full_cache_means_no_misses(world):
    store = world["store"]
    hot = hot_for(world, 10**6)
    c, _ = build_cache(hot, store, NET, 0)
    for meta in world["metas"]:
        assert stage_batch(meta, c, store, NET, 0).miss_count == 0


def run_prefetched(world, q, hot, net=NET, delay=0.0):
    store = world["store"]
    c, _ = build_cache(hot, store, NET, 0)
    meter = ResidentMeter()
    meter.add(len(c))
    queue = PrefetchQueue(q, meter)
    pf = Prefetcher(stream_blocks(world["path"], epoch=0), CacheBuffers(c, meter), store, net, queue, 0).start()
    out = []
    for i in range(len(world["metas"])):
        if delay:
            time.sleep(delay)
        assert len(queue) <= q
        out.append(take_batch(queue, i))
    pf.stop()
    return out, queue, meter, c


@pytest.mark.parametrize("q", [1, 3])
def test_queue_bound_and_order(world, q):
    hot = hot_for(world, 100)
    out, queue, meter, c = run_prefetched(world, q, hot, delay=0.002)
    assert queue.max_depth <= q
    m_max = max(m.input_nodes.size for m in world["metas"])
    assert meter.high_water <= 2 * 100 + q * m_max
    assert meter.rows == len(c)
    staged = [s for s in out if s is not None]
    assert [s.index for s in staged] == sorted(s.index for s in staged)
    assert queue.fallbacks == sum(s is None for s in out)


def test_miss_ids_match_oracle_through_queue(world):
    hot = hot_for(world, 150)
    out, *_ = run_prefetched(world, 2, hot)
    mask = world["store"].local_mask(0)
    for i, sb in enumerate(out):
        if sb is None:
            continue
        assert sb.meta == world["metas"][i]
        assert sb.meta.input_nodes[sb.source_tags == SRC_SYNCPULL].tolist() == oracle_miss(sb.meta, mask, hot)


def test_disabled_prefetcher_falls_back_value_identically(world):
    store = world["store"]
    hot = hot_for(world, 150)
    c, _ = build_cache(hot, store, NET, 0)
    queue = PrefetchQueue(2)
    staged = [stage_batch(m, c, store, NET, 0) for m in world["metas"]]
    for i, meta in enumerate(world["metas"]):
        assert take_batch(queue, i) is None
        fb = stage_batch(meta, c, store, NET, 0)
        assert np.array_equal(fb.input_rows, staged[i].input_rows)
        assert fb.miss_count == staged[i].miss_count
        assert fb.stats.bytes == staged[i].stats.bytes
        assert np.array_equal(fb.source_tags, staged[i].source_tags)
    assert queue.fallbacks == len(world["metas"])


def test_out_of_order_take_rejected():
    q = PrefetchQueue(2)
    with pytest.raises(ValueError, match="in order"):
        q.take(1)
    assert q.take(0) is None
    with pytest.raises(ValueError):
        q.take(0)


def test_trainer_waits_for_inflight_batch():
    q = PrefetchQueue(1)
    assert q.reserve(0, 10)
    got = []
    t = threading.Thread(target=lambda: got.append(q.take(0)))
    t.start()
    time.sleep(0.05)
    assert t.is_alive()  # still waiting for the prefetcher to publish
    marker = object()
    q.put(marker, 0)
    t.join(1)
    assert got == [marker]
    assert q.fallbacks == 0


def test_claimed_batch_not_staged_twice():
    q = PrefetchQueue(2)
    assert q.take(0) is None  # trainer claims 0 first
    assert not q.reserve(0, 5)
    assert q.reserve(1, 5)
    assert q.meter.rows == 5


def test_producer_blocks_when_full():
    q = PrefetchQueue(1)
    assert q.reserve(0, 1)
    q.put("b0", 0)
    result = []
    t = threading.Thread(target=lambda: result.append(q.reserve(1, 1)))
    t.start()
    time.sleep(0.05)
    assert t.is_alive() and len(q) == 1
    assert q.take(0) == "b0"
    t.join(1)
    assert result == [True]


def test_staging_failure_marks_unstaged(world, monkeypatch):
    import rapidgnn.cache as cache_mod

    real = cache_mod.stage_batch

    def flaky(meta, *a, **k):
        if meta.index == 2:
            raise RuntimeError("boom")
        return real(meta, *a, **k)

    monkeypatch.setattr(cache_mod, "stage_batch", flaky)
    store = world["store"]
    c = SteadyCache.empty(store.dim)
    queue = PrefetchQueue(len(world["metas"]))
    n = prefetch_loop(stream_blocks(world["path"], epoch=0), CacheBuffers(c), store, NET, queue, 0)
    assert n == len(world["metas"]) - 1
    results = [queue.take(i) for i in range(len(world["metas"]))]
    assert results[2] is None and all(r is not None for k, r in enumerate(results) if k != 2)
    assert queue.meter.rows == 0
