"""Same seeds, two data paths: fetch-on-demand baseline against the scheduled one.

Run with ``python3 demos/03_baseline_vs_rapidgnn.py``.
"""
from rapidgnn import ExperimentConfig, fetch_wait_ratio, run_experiment
from rapidgnn.harness import load_graph

cfg = ExperimentConfig(epochs=4, latency_us=1000, bandwidth_mbps=10000)
data = load_graph(cfg)

# 1. run both modes on the same graph, partition and batch seeds
base = run_experiment(cfg.replace(mode="baseline"), data)
fast = run_experiment(cfg.replace(mode="rapidgnn"), data)

# 2. per-epoch makespan (slowest worker)
for e, (tb, tr) in enumerate(zip(base.epoch_times(), fast.epoch_times())):
    print(f"epoch {e}: baseline {tb:.4f}s  rapidgnn {tr:.4f}s")

# 3. fewer rows on the wire, and far less time blocked waiting for them
print("rows fetched   baseline", sum(base.column("rpc")), " rapidgnn", sum(fast.column("rpc")))
print("fetch-wait ratio (baseline / rapidgnn): %.1f" % fetch_wait_ratio(base, fast))

# 4. both modes train the same model: the data path only changes timing
print("final accuracy baseline %.4f  rapidgnn %.4f" % (base.accuracy[-1], fast.accuracy[-1]))
