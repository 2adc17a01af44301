"""Seeded K-hop neighbor sampling and per-epoch batch enumeration.

Every batch is a pure function of ``(graph, targets, fanout, seed)``. Seeds come
from :func:`derive_seed`, a SHA-256 of the tuple ``(s0, worker, epoch, index)``;
the derived value initialises a SplitMix64 stream which drives a partial
Fisher-Yates shuffle over each frontier node's neighbor list.

Fanouts are listed outermost hop first (the DGL convention), so
``fanout[-1]`` is applied to the targets and ``fanout[0]`` to the hop that
reaches the input layer.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .graph import Graph

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
SHUFFLE_INDEX = 1 << 32  # reserved batch index for the epoch shuffle seed

_U64 = np.uint64


def derive_seed(s0: int, worker: int, epoch: int, index: int) -> int:
    """First 8 bytes (little-endian) of SHA-256 over four little-endian u64s."""
    msg = struct.pack("<4Q", s0 & MASK64, worker & MASK64, epoch & MASK64, index & MASK64)
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 stream seeded with ``seed``.

    SplitMix64 is counter based: output ``k`` mixes ``seed + (k + 1) * gamma``,
    so a block can be produced without stepping through the earlier outputs.
    """
    k = np.arange(start + 1, start + count + 1, dtype=_U64)
    with np.errstate(over="ignore"):
        z = _U64(seed & MASK64) + k * _U64(GOLDEN_GAMMA)
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        z = z ^ (z >> _U64(31))
    return z


class SplitMix64:
    """Scalar reference stream; used by the tests and for readability."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def unit_double(raw: np.ndarray) -> np.ndarray:
    """Top 53 bits of each output as a double in [0, 1)."""
    return (raw >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class Fanout:
    per_layer: tuple[int, ...]

    def __post_init__(self):
        if not self.per_layer:
            raise ValueError("fanout needs at least one layer")
        if any(int(f) < 1 for f in self.per_layer):
            raise ValueError("every fanout entry must be >= 1")
        object.__setattr__(self, "per_layer", tuple(int(f) for f in self.per_layer))

    @classmethod
    def parse(cls, text: str) -> "Fanout":
        return cls(tuple(int(t) for t in text.replace(" ", "").split(",") if t))

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)

    def input_bound(self, num_targets: int) -> int:
        """Largest possible ``|input_nodes|`` for a batch of ``num_targets``."""
        return num_targets * math.prod(1 + f for f in self.per_layer)


def _as_fanout(f) -> Fanout:
    return f if isinstance(f, Fanout) else Fanout(tuple(f))


@dataclass
class BatchMeta:
    """Sampled computation block of one mini-batch.

    ``layers[l]`` holds the ``(dst, src)`` edge arrays of model layer ``l``;
    the last layer's ``dst`` are the targets. ``locality[k]`` is true when
    ``input_nodes[k]`` is stored on the sampling worker.
    """

    epoch: int
    index: int
    targets: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]]
    input_nodes: np.ndarray
    locality: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.locality is None:
            self.locality = np.zeros(self.input_nodes.shape[0], dtype=bool)

    def layer_nodes(self) -> list[np.ndarray]:
        """Node sets feeding each layer; entry ``L`` is the target list."""
        nodes = [self.targets]
        for dst, src in reversed(self.layers):
            nodes.append(np.union1d(nodes[-1], src))
        return nodes[::-1]

    def remote_nodes(self) -> np.ndarray:
        return self.input_nodes[~self.locality]

    def __eq__(self, other):
        if not isinstance(other, BatchMeta):
            return NotImplemented
        return (
            self.epoch == other.epoch
            and self.index == other.index
            and np.array_equal(self.targets, other.targets)
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                for a, b in zip(self.layers, other.layers)
            )
            and np.array_equal(self.input_nodes, other.input_nodes)
            and np.array_equal(self.locality, other.locality)
        )


def _pick(deg: int, f: int, draws: np.ndarray) -> list[int]:
    """Partial Fisher-Yates: ``f`` distinct positions out of ``range(deg)``."""
    swapped: dict[int, int] = {}
    out = []
    for j in range(f):
        r = j + int(draws[j] * (deg - j))
        vr = swapped.get(r, r)
        swapped[r] = swapped.get(j, j)
        out.append(vr)
    return out


def _sample_layer(g: Graph, frontier: np.ndarray, f: int, seed: int, cursor: int):
    """Sample one hop for every frontier node; returns (dst, src, new_cursor)."""
    off, col = g.row_offsets, g.col_indices
    deg = off[frontier + 1] - off[frontier]
    big = deg > f
    n_draws = int(big.sum()) * f
    u = unit_double(splitmix64_block(seed, cursor, n_draws))
    dst_parts, src_parts = [], []
    k = 0
    for v, d, b in zip(frontier.tolist(), deg.tolist(), big.tolist()):
        if d == 0:
            continue
        nb = col[off[v] : off[v] + d]
        if b:
            picked = np.sort(nb[_pick(d, f, u[k : k + f])])
            k += f
        else:
            picked = nb
        src_parts.append(picked)
        dst_parts.append(np.full(picked.shape[0], v, dtype=np.int64))
    if src_parts:
        dst = np.concatenate(dst_parts)
        src = np.concatenate(src_parts).astype(np.int64)
    else:
        dst = src = np.empty(0, dtype=np.int64)
    return dst, src, cursor + n_draws


def sample_khop(g: Graph, targets, fanout, seed: int, epoch: int = 0, index: int = 0) -> BatchMeta:
    """Sample the multi-hop computation block of ``targets``.

    Nodes with degree at most the fanout keep their whole neighborhood;
    otherwise ``f`` distinct neighbors are chosen uniformly without
    replacement. Frontiers are visited in ascending node order and consume the
    stream sequentially, so the result is bit-exact given the seed.
    """
    fanout = _as_fanout(fanout)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("targets must be non-empty")
    if targets.min() < 0 or targets.max() >= g.num_nodes:
        raise ValueError("target id out of range")
    frontier = np.unique(targets)
    layers = []
    cursor = 0
    for f in reversed(fanout.per_layer):
        dst, src, cursor = _sample_layer(g, frontier, f, seed, cursor)
        layers.append((dst, src))
        frontier = np.union1d(frontier, src)
    layers.reverse()
    return BatchMeta(epoch, index, targets.copy(), layers, frontier)


def shuffle(items: np.ndarray, seed: int) -> np.ndarray:
    """Full Fisher-Yates driven by the SplitMix64 stream of ``seed``."""
    out = np.array(items, copy=True)
    n = out.shape[0]
    u = unit_double(splitmix64_block(seed, 0, max(n - 1, 0)))
    for k, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[k] * (i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def num_batches(num_train: int, batch_size: int) -> int:
    return -(-num_train // batch_size)


def enumerate_epochs(
    g: Graph,
    train_nodes,
    batch_size: int,
    fanout,
    epochs: int,
    s0: int,
    worker: int,
    pm=None,
    local_mask: np.ndarray | None = None,
) -> Iterator[BatchMeta]:
    """Yield every batch of every epoch in (epoch, index) order.

    The epoch's target order is a shuffle seeded with
    ``derive_seed(s0, worker, e, 2**32)``; batch ``i`` is sampled with
    ``derive_seed(s0, worker, e, i)``. Locality comes from ``local_mask`` when
    given, otherwise from ownership in ``pm``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    fanout = _as_fanout(fanout)
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if local_mask is None:
        if pm is None:
            local_mask = np.zeros(g.num_nodes, dtype=bool)
        else:
            local_mask = np.asarray(getattr(pm, "assignment", pm)) == worker
    for e in range(epochs):
        yield from schedule_batches(g, train_nodes, batch_size, fanout, s0, worker, e, local_mask)


class OnlineSampler:
    """Conventional on-the-fly sampler backed by one stateful numpy Generator.

    It shares no randomness with the scheduled path; it is the reference the
    precomputed schedule is compared against for convergence.
    """

    def __init__(self, g: Graph, fanout, seed: int):
        self.g = g
        self.fanout = _as_fanout(fanout)
        self.rng = np.random.default_rng(np.uint64(seed & MASK64))

    def epoch_order(self, train_nodes) -> np.ndarray:
        return self.rng.permutation(np.asarray(train_nodes, dtype=np.int64))

    def sample(self, targets, epoch: int = 0, index: int = 0) -> BatchMeta:
        g = self.g
        off, col = g.row_offsets, g.col_indices
        targets = np.asarray(targets, dtype=np.int64)
        frontier = np.unique(targets)
        layers = []
        for f in reversed(self.fanout.per_layer):
            dsts, srcs = [], []
            for v in frontier.tolist():
                nb = col[off[v] : off[v + 1]]
                if nb.size > f:
                    nb = np.sort(self.rng.choice(nb, size=f, replace=False))
                srcs.append(nb)
                dsts.append(np.full(nb.size, v, dtype=np.int64))
            dst = np.concatenate(dsts) if dsts else np.empty(0, np.int64)
            src = np.concatenate(srcs).astype(np.int64) if srcs else np.empty(0, np.int64)
            layers.append((dst, src))
            frontier = np.union1d(frontier, src)
        layers.reverse()
        return BatchMeta(epoch, index, targets.copy(), layers, frontier)


def schedule_batches(g, train_nodes, batch_size, fanout, s0, worker, epoch, local_mask):
    """Batches of a single epoch under the scheduled (hash-seeded) sampler."""
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    order = shuffle(train_nodes, derive_seed(s0, worker, epoch, SHUFFLE_INDEX))
    for i in range(num_batches(train_nodes.size, batch_size)):
        tgt = order[i * batch_size : (i + 1) * batch_size]
        meta = sample_khop(g, tgt, fanout, derive_seed(s0, worker, epoch, i), epoch=epoch, index=i)
        meta.locality = local_mask[meta.input_nodes]
        yield meta
