"""Epoch makespan as the number of simulated workers grows.

Run with ``python3 demos/04_scaling.py``.
"""
from rapidgnn import ExperimentConfig, run_scaling

# 1. a larger graph so that each worker still has a few batches at P=4
cfg = ExperimentConfig(num_nodes=4000, epochs=2)

# 2. speedup is relative to the smallest worker count in the list
for row in run_scaling(cfg, [1, 2, 3, 4]):
    print(f"P={row['workers']}: makespan {row['makespan']:.4f}s  speedup {row['speedup']:.2f}  rpc {row['rpc']}")
