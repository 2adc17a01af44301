"""Two-layer GraphSAGE (mean aggregator) with hand-written backward pass.

Layer ``l`` computes, for every destination node ``v``::

    h'_v = act(h_v @ W_self + mean_{u in sampled(v)} h_u @ W_neigh + b)

with ReLU on hidden layers and identity on the output layer. A node without
sampled neighbors aggregates the zero vector.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph
from .sampler import BatchMeta


@dataclass
class SageLayer:
    w_self: np.ndarray
    w_neigh: np.ndarray
    bias: np.ndarray

    def arrays(self):
        return (self.w_self, self.w_neigh, self.bias)


@dataclass
class SageModel:
    layers: list[SageLayer]

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, num_classes: int, num_layers: int = 2,
             seed: int = 0, dtype=np.float32) -> "SageModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (d_in + d_out))
            layers.append(SageLayer(
                rng.uniform(-lim, lim, (d_in, d_out)).astype(dtype),
                rng.uniform(-lim, lim, (d_in, d_out)).astype(dtype),
                np.zeros(d_out, dtype=dtype),
            ))
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].w_self.shape[0]] + [l.w_self.shape[1] for l in self.layers]

    @property
    def dtype(self):
        return self.layers[0].w_self.dtype

    def num_parameters(self) -> int:
        return sum(a.size for l in self.layers for a in l.arrays())

    def copy(self) -> "SageModel":
        return SageModel([SageLayer(*(a.copy() for a in l.arrays())) for l in self.layers])

    def astype(self, dtype) -> "SageModel":
        return SageModel([SageLayer(*(a.astype(dtype) for a in l.arrays())) for l in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for l in self.layers for a in l.arrays()])


Gradients = list[SageLayer]


def _mean_operator(dst_local: np.ndarray, src_local: np.ndarray, n_dst: int, n_src: int, dtype) -> sp.csr_matrix:
    deg = np.bincount(dst_local, minlength=n_dst)
    vals = (1.0 / deg[dst_local]).astype(dtype) if dst_local.size else np.empty(0, dtype)
    return sp.csr_matrix((vals, (dst_local, src_local)), shape=(n_dst, n_src), dtype=dtype)


@dataclass
class ComputeBlock:
    """Index-remapped per-layer structure of one batch plus its input rows.

    For layer ``l``: ``self_index[l]`` picks each destination row out of the
    layer's input rows, and ``agg[l]`` is the row-normalised
    (destination x input) sampled adjacency.
    """

    inputs: np.ndarray
    self_index: list[np.ndarray]
    agg: list[sp.csr_matrix]
    target_pos: np.ndarray
    num_edges: list[int]

    @classmethod
    def from_batch(cls, meta: BatchMeta, input_rows: np.ndarray, dtype=np.float32) -> "ComputeBlock":
        nodes = meta.layer_nodes()
        if input_rows.shape[0] != nodes[0].size:
            raise ValueError("input rows do not match the batch's input nodes")
        nodes[-1] = np.unique(meta.targets)
        self_index, agg, n_edges = [], [], []
        for l, (dst, src) in enumerate(meta.layers):
            src_nodes, dst_nodes = nodes[l], nodes[l + 1]
            self_index.append(np.searchsorted(src_nodes, dst_nodes))
            d = np.searchsorted(dst_nodes, dst)
            s = np.searchsorted(src_nodes, src)
            agg.append(_mean_operator(d, s, dst_nodes.size, src_nodes.size, dtype))
            n_edges.append(int(dst.size))
        target_pos = np.searchsorted(nodes[-1], meta.targets)
        return cls(np.asarray(input_rows, dtype=dtype), self_index, agg, target_pos, n_edges)


def _forward(m: SageModel, blk: ComputeBlock):
    if blk.inputs.shape[1] != m.dims[0] or len(blk.agg) != len(m.layers):
        raise ValueError(
            f"block has {len(blk.agg)} layers / width {blk.inputs.shape[1]}, "
            f"model expects {len(m.layers)} / {m.dims[0]}"
        )
    h = blk.inputs.astype(m.dtype, copy=False)
    cache = []
    last = len(m.layers) - 1
    for l, layer in enumerate(m.layers):
        hs = h[blk.self_index[l]]
        ha = blk.agg[l] @ h
        z = hs @ layer.w_self + ha @ layer.w_neigh + layer.bias
        cache.append((h, hs, ha, z))
        h = np.maximum(z, 0) if l < last else z
    return h[blk.target_pos], cache


def forward(m: SageModel, blk: ComputeBlock) -> np.ndarray:
    """Logits for every target of ``blk`` (duplicates included)."""
    return _forward(m, blk)[0]


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(m: SageModel, blk: ComputeBlock, labels) -> tuple[float, Gradients]:
    """Mean cross-entropy over the targets and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(m, blk)
    t = logits.shape[0]
    p = _softmax(logits)
    loss = float(-np.mean(np.log(p[np.arange(t), labels])))

    dlogits = p
    dlogits[np.arange(t), labels] -= 1
    dlogits /= t
    h_out = cache[-1][3]
    dh = np.zeros_like(h_out)
    np.add.at(dh, blk.target_pos, dlogits)

    grads: list[SageLayer] = [None] * len(m.layers)
    last = len(m.layers) - 1
    for l in range(last, -1, -1):
        layer = m.layers[l]
        h_in, hs, ha, z = cache[l]
        dz = dh * (z > 0) if l < last else dh
        grads[l] = SageLayer(hs.T @ dz, ha.T @ dz, dz.sum(axis=0))
        if l == 0:
            break
        dh_in = blk.agg[l].T @ (dz @ layer.w_neigh.T)
        dh_in[blk.self_index[l]] += dz @ layer.w_self.T
        dh = dh_in.astype(m.dtype, copy=False)
    return loss, grads


def average_grads(grad_sets: list[Gradients]) -> Gradients:
    n = len(grad_sets)
    out = []
    for parts in zip(*grad_sets):
        arrays = [np.sum([p.arrays()[k] for p in parts], axis=0) / np.asarray(n, parts[0].w_self.dtype)
                  for k in range(3)]
        out.append(SageLayer(*arrays))
    return out


def sgd_step(m: SageModel, grads: Gradients, lr: float) -> SageModel:
    """Return ``theta - lr * grad``; non-finite gradients are rejected."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for l, g in enumerate(grads):
        for name, a in zip(("w_self", "w_neigh", "bias"), g.arrays()):
            if not np.all(np.isfinite(a)):
                bad = int(np.size(a) - np.isfinite(a).sum())
                raise FloatingPointError(f"layer {l} {name}: {bad} non-finite gradient entries")
    lr_t = np.asarray(lr, dtype=m.dtype)
    return SageModel([
        SageLayer(*(p - lr_t * gp for p, gp in zip(layer.arrays(), g.arrays())))
        for layer, g in zip(m.layers, grads)
    ])


def full_graph_logits(m: SageModel, g: Graph, features: np.ndarray) -> np.ndarray:
    """Forward pass over the whole graph with unsampled neighborhoods."""
    deg = g.degrees()
    src = np.repeat(np.arange(g.num_nodes), deg)
    a = _mean_operator(src, g.col_indices, g.num_nodes, g.num_nodes, m.dtype)
    h = np.asarray(features, dtype=m.dtype)
    last = len(m.layers) - 1
    for l, layer in enumerate(m.layers):
        z = h @ layer.w_self + (a @ h) @ layer.w_neigh + layer.bias
        h = np.maximum(z, 0) if l < last else z
    return h


def evaluate(m: SageModel, g: Graph, features: np.ndarray, labels, nodes) -> float:
    """Fraction of ``nodes`` whose full-neighborhood prediction is correct."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("cannot evaluate on an empty node set")
    y = np.asarray(getattr(labels, "values", labels))
    pred = full_graph_logits(m, g, features)[nodes].argmax(axis=1)
    return float(np.mean(pred == y[nodes]))


def block_flops(m: SageModel, blk: ComputeBlock) -> float:
    """Approximate forward+backward floating point operations for one step."""
    total = 0.0
    for l, layer in enumerate(m.layers):
        d_in, d_out = layer.w_self.shape
        n_dst = blk.self_index[l].size
        dense = 2.0 * 2 * n_dst * d_in * d_out
        sparse = 2.0 * blk.num_edges[l] * d_in
        total += dense + sparse
    return 3.0 * total


def save_checkpoint(m: SageModel, path) -> None:
    """u32 layer count, u32 (d_in, d_out) per layer, then float32 W_self, W_neigh, bias per layer."""
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<I", len(m.layers)))
        for layer in m.layers:
            fh.write(struct.pack("<2I", *layer.w_self.shape))
        for layer in m.layers:
            for a in layer.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> SageModel:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", raw, 0)
    shapes = [struct.unpack_from("<2I", raw, 4 + 8 * k) for k in range(n)]
    pos = 4 + 8 * n
    layers = []
    for d_in, d_out in shapes:
        arrays = []
        for shape in ((d_in, d_out), (d_in, d_out), (d_out,)):
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32))
            pos += 4 * count
        layers.append(SageLayer(*arrays))
    if pos != len(raw):
        raise ValueError("checkpoint size does not match its header")
    return SageModel(layers)
