"""Experiment driver: scheduled (rapidgnn) vs on-demand (baseline) training.

``run_experiment`` partitions the graph, enumerates and writes every worker's
batches, then trains with synchronous gradient averaging across the simulated
workers, collecting one :class:`EpochRow` per (epoch, worker).
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import BaselineEngine, RapidEngine
from .graph import FEATURE_BYTES, Labels, read_edge_list, synth_powerlaw
from .kv import FeatureStore, NetworkModel
from .model import (
    ComputeBlock,
    SageModel,
    average_grads,
    block_flops,
    evaluate,
    loss_and_grad,
    save_checkpoint,
    sgd_step,
)
from .partition import greedy_edgecut_partition, random_partition
from .sampler import Fanout, derive_seed, enumerate_epochs
from .schedule import compute_frequency, stream_blocks, write_blocks

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "epoch", "worker", "mode", "wall_time", "rpc", "wire_pulls", "fallback_count", "bytes",
    "fetch_wait", "transfer_time", "cache_hit_rate", "staged_hit_rate", "peak_staged_rows",
    "memory_bound_rows", "memory_ok", "cache_swapped", "cache_build_bytes", "train_accuracy",
    "estimated_busy_seconds",
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # graph
    num_nodes: int = 2000
    avg_degree: int = 10
    exponent: float = 2.1
    feature_dim: int = 32
    num_classes: int = 4
    graph_seed: int = 7
    homophily: float = 0.7
    separation: float = 1.0
    edge_list: str | None = None
    # partitioning
    workers: int = 2
    partitioner: str = "greedy"
    imbalance: float = 0.05
    halo_features: bool = False
    # schedule
    batch_size: int = 64
    fanout: tuple[int, ...] = (10, 5)
    epochs: int = 5
    seed: int = 0
    train_fraction: float = 1.0
    # data path
    mode: str = "rapidgnn"
    sampling: str = "schedule"
    n_hot: int = 256
    prefetch_q: int = 4
    prefetch: bool = True
    freq_scope: str = "epoch"
    # network and compute model
    latency_us: float = 1000.0
    bandwidth_mbps: float = 10000.0
    network: bool = True
    flops: float = 2e9
    clock: str = "sim"
    # training
    lr: float = 0.5
    hidden_dim: int = 64
    # output
    out: str | None = None
    block_dir: str | None = None
    keep_miss_ids: bool = False
    hot_set_delta: int = 0  # test hook for fault injection

    def validate(self) -> "ExperimentConfig":
        if isinstance(self.fanout, str):
            self.fanout = Fanout.parse(self.fanout).per_layer
        self.fanout = tuple(int(f) for f in self.fanout)
        positive = ["num_nodes", "avg_degree", "feature_dim", "num_classes", "workers", "batch_size",
                    "prefetch_q", "hidden_dim"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_hot < 0:
            raise ConfigError("n_hot must be >= 0")
        if not self.fanout or min(self.fanout) < 1:
            raise ConfigError("fanout entries must be >= 1")
        choices = {"partitioner": ("random", "greedy"), "mode": ("rapidgnn", "baseline"),
                   "sampling": ("schedule", "online"), "clock": ("sim", "wall"),
                   "freq_scope": ("epoch", "run")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.mode == "rapidgnn" and self.sampling != "schedule":
            raise ConfigError("rapidgnn mode requires the precomputed schedule (sampling=schedule)")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.lr <= 0 or self.flops <= 0 or self.bandwidth_mbps <= 0 or self.latency_us < 0:
            raise ConfigError("lr, flops and bandwidth must be > 0 and latency >= 0")
        return self

    def network_model(self) -> NetworkModel:
        return NetworkModel(
            per_pull_latency=self.latency_us * 1e-6,
            bandwidth=self.bandwidth_mbps * 1e6 / 8,
            enabled=self.network,
            sleep=self.clock == "wall",
        )

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read ``key = value`` lines (``#`` comments); keys are field names, dashes allowed."""
    cfg = base or ExperimentConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    updates = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in kinds:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        updates[key] = coerce(key, value)
    return cfg.replace(**updates)


def coerce(key: str, value: str):
    default = getattr(ExperimentConfig(), key)
    if key == "fanout":
        try:
            return Fanout.parse(value).per_layer
        except ValueError as exc:
            raise ConfigError(f"fanout: {exc}") from None
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if value.lower() in ("", "none"):
        return None
    return value


@dataclass
class EpochRow:
    epoch: int
    worker: int
    mode: str
    wall_time: float
    rpc: int
    wire_pulls: int
    fallback_count: int
    bytes: int
    fetch_wait: float  # trainer blocked waiting for batch features
    transfer_time: float  # summed link time of the epoch's per-step pulls
    cache_hit_rate: float
    staged_hit_rate: float
    peak_staged_rows: int
    memory_bound_rows: int
    memory_ok: bool
    cache_swapped: bool
    cache_build_bytes: int
    train_accuracy: float
    estimated_busy_seconds: float


@dataclass
class MetricsReport:
    config: ExperimentConfig
    rows: list[EpochRow] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    setup_time: float = 0.0
    setup_bytes: int = 0
    feature_dim: int = 0
    step_counter_nodes: int = 0
    step_counter_bytes: int = 0
    records: list = field(default_factory=list)
    block_paths: list = field(default_factory=list)
    local_masks: list = field(default_factory=list)
    hot_sets: list = field(default_factory=list)
    memory: list = field(default_factory=list)  # (worker, high_water, bound)
    model: SageModel | None = None

    def column(self, name: str, worker: int | None = None) -> list:
        return [getattr(r, name) for r in self.rows if worker is None or r.worker == worker]

    def epoch_times(self) -> list[float]:
        """Makespan per epoch: slowest worker."""
        by_epoch: dict[int, float] = {}
        for r in self.rows:
            by_epoch[r.epoch] = max(by_epoch.get(r.epoch, 0.0), r.wall_time)
        return [by_epoch[e] for e in sorted(by_epoch)]

    def per_epoch(self, name: str) -> list:
        """Sum of a column over workers, per epoch."""
        out: dict[int, float] = {}
        for r in self.rows:
            out[r.epoch] = out.get(r.epoch, 0) + getattr(r, name)
        return [out[e] for e in sorted(out)]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def load_graph(cfg: ExperimentConfig):
    if cfg.edge_list:
        g = read_edge_list(cfg.edge_list)
        rng = np.random.default_rng(cfg.graph_seed)
        labels = Labels(rng.integers(0, cfg.num_classes, g.num_nodes), cfg.num_classes)
        centers = rng.standard_normal((cfg.num_classes, cfg.feature_dim)) * cfg.separation
        feats = (centers[labels.values] + rng.standard_normal((g.num_nodes, cfg.feature_dim))).astype(np.float32)
        return g, feats, labels
    return synth_powerlaw(cfg.num_nodes, cfg.avg_degree, cfg.exponent, cfg.feature_dim, cfg.num_classes,
                          cfg.graph_seed, homophily=cfg.homophily, separation=cfg.separation)


def make_partition(cfg: ExperimentConfig, g):
    if cfg.partitioner == "random":
        return random_partition(g.num_nodes, cfg.workers, cfg.seed)
    return greedy_edgecut_partition(g, cfg.workers, cfg.imbalance)


def train_nodes_for(cfg: ExperimentConfig, n: int) -> np.ndarray:
    if cfg.train_fraction >= 1:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(derive_seed(cfg.seed, 0, 0, 1 << 34))
    k = max(1, int(round(cfg.train_fraction * n)))
    return np.sort(rng.permutation(n)[:k])


def _allreduce_cost(cfg: ExperimentConfig, model: SageModel, net: NetworkModel) -> float:
    if cfg.workers == 1 or not net.enabled:
        return 0.0
    nbytes = model.num_parameters() * 4
    return net.per_pull_latency + 2 * (cfg.workers - 1) / cfg.workers * nbytes / net.bandwidth


def run_experiment(cfg: ExperimentConfig, graph_data=None) -> MetricsReport:
    """Run one configuration end to end and emit ``metrics.csv`` when ``cfg.out`` is set."""
    cfg.validate()
    report = MetricsReport(cfg)
    if cfg.epochs == 0:
        _emit(report)
        return report

    g, feats, labels = graph_data or load_graph(cfg)
    pm = make_partition(cfg, g)
    halo = None
    if cfg.halo_features:
        from .graph import induce_partition
        halo = {w: induce_partition(g, pm, w).halo for w in range(cfg.workers)}
    store = FeatureStore(feats, pm, halo=halo)
    net = cfg.network_model()
    fanout = Fanout(cfg.fanout)
    train = train_nodes_for(cfg, g.num_nodes)
    report.feature_dim = store.dim

    tmp = None
    block_dir = cfg.block_dir or cfg.out
    if cfg.mode == "rapidgnn" and block_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="rapidgnn-")
        block_dir = tmp.name

    engines = []
    try:
        for w in range(cfg.workers):
            mask = store.local_mask(w)
            report.local_masks.append(mask)
            own_train = train[pm.assignment[train] == w]
            if cfg.mode == "baseline":
                engines.append(BaselineEngine(w, store, net, cfg.clock, g, own_train, cfg.batch_size, fanout,
                                              cfg.seed, cfg.sampling, cfg.keep_miss_ids))
                continue
            Path(block_dir).mkdir(parents=True, exist_ok=True)
            path = Path(block_dir) / f"blocks_w{w}.rgmb"
            sizes = []
            stream = enumerate_epochs(g, own_train, cfg.batch_size, fanout, cfg.epochs, cfg.seed, w,
                                      local_mask=mask)
            info = write_blocks(_tap(stream, sizes), path, worker=w, epochs=cfg.epochs)
            report.block_paths.append(path)
            engines.append(RapidEngine(
                w, store, net, cfg.clock, path, info.batch_counts, cfg.n_hot, cfg.prefetch_q,
                max(sizes, default=0), cfg.freq_scope, cfg.prefetch, cfg.hot_set_delta, cfg.keep_miss_ids,
            ))
        _train(cfg, report, engines, g, feats, labels, net)
    finally:
        if tmp is not None:
            tmp.cleanup()

    for w in range(cfg.workers):
        snap = store.counters[w]["step"].snapshot()
        report.step_counter_nodes += snap.remote_nodes
        report.step_counter_bytes += snap.bytes
    _emit(report)
    return report


def _tap(stream, sizes):
    for meta in stream:
        sizes.append(int(meta.input_nodes.size))
        yield meta


def _train(cfg, report, engines, g, feats, labels, net):
    model = SageModel.init(feats.shape[1], cfg.hidden_dim, labels.num_classes, len(cfg.fanout),
                           seed=derive_seed(cfg.seed, 0, 0, 1 << 35) & 0xFFFFFFFF)
    y = labels.values
    sim = cfg.clock == "sim"
    setup = [e.setup() for e in engines]
    report.setup_time = max(setup, default=0.0)
    report.setup_bytes = sum(e.setup_stats.bytes for e in engines)
    ar_cost = _allreduce_cost(cfg, model, net)

    now = 0.0 if sim else time.perf_counter()
    for epoch in range(cfg.epochs):
        t_start = now
        for eng in engines:
            eng.begin_epoch(epoch, t_start)
        steps = max(eng.num_batches(epoch) for eng in engines)
        for s in range(steps):
            grads, done = [], []
            for eng in engines:
                if s >= eng.num_batches(epoch):
                    done.append(now)
                    continue
                staged, ready = eng.fetch(s, now)
                t_c = time.perf_counter()
                blk = ComputeBlock.from_batch(staged.meta, staged.input_rows)
                _, gr = loss_and_grad(model, blk, y[staged.meta.targets])
                c = block_flops(model, blk) / cfg.flops if sim else time.perf_counter() - t_c
                eng.add_compute(c)
                grads.append(gr)
                done.append(ready + c)
            model = sgd_step(model, average_grads(grads), cfg.lr)
            now = (max(done) + ar_cost) if sim else time.perf_counter()
        counters = [eng.end_epoch(now) for eng in engines]
        elapsed = now - t_start
        acc = evaluate(model, g, feats, labels, np.arange(g.num_nodes))
        report.accuracy.append(acc)
        for eng, c in zip(engines, counters):
            remote = max(c.remote_inputs, 1)
            bound = eng.memory_bound
            peak = c.peak_rows
            report.rows.append(EpochRow(
                epoch=epoch, worker=eng.worker, mode=eng.mode, wall_time=elapsed,
                rpc=c.stats.remote_nodes, wire_pulls=c.stats.pulls, fallback_count=c.fallbacks,
                bytes=c.stats.bytes, fetch_wait=c.stall, transfer_time=c.stats.simulated_wait,
                cache_hit_rate=c.cache_hits / remote if c.remote_inputs else 1.0,
                staged_hit_rate=c.staged / c.batches if c.batches else 0.0,
                peak_staged_rows=peak, memory_bound_rows=bound,
                memory_ok=eng.mode != "rapidgnn" or peak <= bound,
                cache_swapped=c.swapped, cache_build_bytes=c.build_bytes, train_accuracy=acc,
                estimated_busy_seconds=c.compute + c.stats.simulated_wait,
            ))
        if not sim:
            now = time.perf_counter()
    for eng in engines:
        report.records.extend(eng.records)
        report.hot_sets.append(getattr(eng, "hot_sets", {}))
        if eng.mode == "rapidgnn":
            report.memory.append((eng.worker, eng.meter.high_water, eng.memory_bound))
    report.model = model


def _emit(report: MetricsReport) -> None:
    cfg = report.config
    if not cfg.out:
        return
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    with (out / "config.txt").open("w") as fh:
        for f in dataclasses.fields(cfg):
            v = getattr(cfg, f.name)
            if f.name == "fanout":
                v = ",".join(str(x) for x in v)
            fh.write(f"{f.name} = {v}\n")
    if report.model is not None:
        save_checkpoint(report.model, out / "model.bin")


def fetch_wait_ratio(baseline: MetricsReport, rapid: MetricsReport) -> float:
    """Time the trainer spent blocked on feature fetches, baseline over rapidgnn."""
    b = sum(r.fetch_wait for r in baseline.rows)
    r = sum(r.fetch_wait for r in rapid.rows)
    return math.inf if r == 0 else b / r


def run_scaling(cfg: ExperimentConfig, worker_counts, graph_data=None, out=None) -> list[dict]:
    """Makespan and speedup per worker count, normalised to the smallest count."""
    cfg.validate()
    graph_data = graph_data or load_graph(cfg)
    rows = []
    for p in sorted(worker_counts):
        rep = run_experiment(cfg.replace(workers=p, out=None), graph_data)
        times = rep.epoch_times()
        rows.append({"workers": p, "makespan": float(np.mean(times)) if times else 0.0,
                     "total_time": float(np.sum(times)), "rpc": int(sum(rep.column("rpc")))})
    base = rows[0]["makespan"] if rows else 0.0
    for r in rows:
        r["speedup"] = base / r["makespan"] if r["makespan"] > 0 else 1.0
    out = out or cfg.out
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with (Path(out) / "scaling.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["workers", "makespan", "total_time", "rpc", "speedup"])
            w.writeheader()
            w.writerows(rows)
    return rows


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str = ""


def _recount(blocks) -> Counter:
    counts: Counter = Counter()
    for meta in blocks:
        for v, local in zip(meta.input_nodes.tolist(), meta.locality.tolist()):
            if not local:
                counts[v] += 1
    return counts


def _oracle_hot(counts: Counter, n_hot: int) -> set:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {v for v, _ in ranked[:n_hot]}


def verify_oracles(cfg: ExperimentConfig) -> list[OracleResult]:
    """Replay the decoded blocks independently and compare with what the run charged."""
    cfg = cfg.replace(mode="rapidgnn", sampling="schedule", keep_miss_ids=True).validate()
    if cfg.num_nodes > 5000 and not cfg.edge_list:
        raise ConfigError("verify_oracles is meant for small configurations (<= 5000 nodes)")
    with tempfile.TemporaryDirectory(prefix="rapidgnn-verify-") as tmp:
        run_cfg = cfg.replace(block_dir=cfg.block_dir or tmp)
        rep = run_experiment(run_cfg)
        results = []
        freq_bad, miss_bad, details = 0, 0, []
        for w, path in enumerate(rep.block_paths):
            recs = {(r.epoch, r.index): r for r in rep.records if r.worker == w}
            swapped = {r.epoch: r.cache_swapped for r in rep.rows if r.worker == w}
            hot = set()
            for e in range(cfg.epochs):
                blocks = list(stream_blocks(path, epoch=e))
                counts = _recount(blocks)
                ft = compute_frequency(blocks)
                if ft.as_dict() != dict(counts):
                    freq_bad += 1
                    details.append(f"frequency w{w} e{e}")
                # a late secondary cache leaves the previous hot set in place
                if e == 0 or swapped.get(e - 1, False):
                    scope_counts = _recount(stream_blocks(path)) if cfg.freq_scope == "run" else counts
                    hot = _oracle_hot(scope_counts, cfg.n_hot)
                for meta in blocks:
                    expect = {v for v, loc in zip(meta.input_nodes.tolist(), meta.locality.tolist())
                              if not loc and v not in hot}
                    got = recs[(e, meta.index)]
                    if got.charged != len(expect) or set(got.miss_ids.tolist()) != expect:
                        miss_bad += 1
                        if len(details) < 10:
                            details.append(f"miss set w{w} e{e} b{meta.index}: charged {got.charged}, "
                                           f"oracle {len(expect)}")
        results.append(OracleResult("frequency_recount", freq_bad == 0,
                                    "; ".join(d for d in details if d.startswith("freq"))))
        results.append(OracleResult("miss_set_replay", miss_bad == 0,
                                    f"{miss_bad} mismatching batches; " + "; ".join(
                                        d for d in details if d.startswith("miss"))))
        byte_bad = [r for r in rep.records if r.bytes != r.charged * rep.feature_dim * FEATURE_BYTES]
        row_bad = [r for r in rep.rows if r.bytes != r.rpc * rep.feature_dim * FEATURE_BYTES]
        results.append(OracleResult("byte_identity", not byte_bad and not row_bad,
                                    f"{len(byte_bad)} batches, {len(row_bad)} epoch rows inconsistent"))
        mem_bad = [(w, hw, b) for w, hw, b in rep.memory if hw > b]
        mem_bad += [(r.worker, r.peak_staged_rows, r.memory_bound_rows) for r in rep.rows if not r.memory_ok]
        results.append(OracleResult("memory_high_water", not mem_bad,
                                    ", ".join(f"w{w}: {hw} > {b}" for w, hw, b in mem_bad)))
        total_rpc = sum(rep.column("rpc"))
        results.append(OracleResult("metrics_consistency", total_rpc == rep.step_counter_nodes,
                                    f"sum rpc {total_rpc} vs store counter {rep.step_counter_nodes}"))
    return results
