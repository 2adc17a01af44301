"""How much remote traffic a hot-node cache of size n_hot removes.

Run with ``python3 demos/02_cache_sweep.py``.
"""
from rapidgnn import ExperimentConfig, run_experiment
from rapidgnn.harness import load_graph

cfg = ExperimentConfig(epochs=3)
data = load_graph(cfg)  # build the graph once, reuse it for every run

# 1. sweep the cache size; rpc counts remote feature rows fetched per epoch
print(f"{'n_hot':>6}  {'rpc per epoch':<24} {'hit rate':>8}")
for n_hot in (0, 64, 256, 1024):
    rep = run_experiment(cfg.replace(n_hot=n_hot), data)
    rpc = rep.per_epoch("rpc")
    hit = sum(rep.column("cache_hit_rate")) / len(rep.rows)
    print(f"{n_hot:>6}  {str(rpc):<24} {hit:8.3f}")

# 2. during each epoch the next epoch's cache is built in the background and
#    swapped in at the boundary; the last epoch has no successor, so no swap
rep = run_experiment(cfg.replace(n_hot=256), data)
print("cache swapped per row:", rep.column("cache_swapped"))
