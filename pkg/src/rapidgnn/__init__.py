"""Scheduled data path for distributed GNN mini-batch training, simulated on one host.

Precompute every mini-batch's sampled neighborhood from a deterministic seed,
cache the most frequently accessed remote feature rows, and prefetch the
residual misses in a bounded queue ahead of the trainer.
"""
from .cache import (
    CacheBuffers,
    PrefetchQueue,
    Prefetcher,
    ResidentMeter,
    SecondaryCache,
    StagedBatch,
    SteadyCache,
    build_cache,
    build_secondary,
    cache_get,
    stage_batch,
    take_batch,
)
from .graph import Graph, Labels, LocalPartition, build_csr, induce_partition, neighbors, read_edge_list, synth_powerlaw
from .harness import (
    ConfigError,
    ExperimentConfig,
    MetricsReport,
    fetch_wait_ratio,
    load_config_file,
    run_experiment,
    run_scaling,
    verify_oracles,
)
from .kv import FeatureStore, NetworkModel, TransferStats, local_lookup, pull_cost, sync_pull, vector_pull
from .model import ComputeBlock, SageModel, evaluate, load_checkpoint, loss_and_grad, save_checkpoint, sgd_step
from .partition import PartitionMap, edge_cut, greedy_edgecut_partition, load_partition, random_partition, save_partition
from .sampler import BatchMeta, Fanout, OnlineSampler, derive_seed, enumerate_epochs, sample_khop
from .schedule import (
    BlockFormatError,
    compute_frequency,
    open_blocks,
    select_hot,
    stream_blocks,
    write_blocks,
)

__version__ = "0.1.0"
