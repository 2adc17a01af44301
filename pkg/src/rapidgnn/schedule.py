"""On-disk metadata blocks and remote-access frequency ranking.

File layout (all integers little-endian)::

    header
      4s   magic  b"RGMB"
      u32  version (1)
      u32  flags   bit 0 set once the writer closed cleanly
      u32  worker
      u32  epochs
      u32  batch count, one per epoch
    record, repeated sum(batch counts) times
      u32  payload length in bytes
      u32  CRC-32 of the payload
      payload
        u32 epoch, u32 index, u32 n_targets, u32 n_layers, u32 n_input
        u32[n_targets] targets
        per layer: u32 n_edges, u32[n_edges] dst, u32[n_edges] src
        u32[n_input] input_nodes
        u8[ceil(n_input / 8)] locality bits, little bit order

The header's batch counts are patched in and the completion flag set when the
writer is closed; readers refuse files without the flag.
"""
from __future__ import annotations

import io
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .sampler import BatchMeta

MAGIC = b"RGMB"
VERSION = 1
FLAG_COMPLETE = 1

_REC = struct.Struct("<II")
_HEAD = struct.Struct("<5I")


class BlockFormatError(ValueError):
    """Raised when a metadata block file is malformed or truncated."""


def encode_batch(meta: BatchMeta) -> bytes:
    parts = [
        _HEAD.pack(
            meta.epoch,
            meta.index,
            meta.targets.size,
            len(meta.layers),
            meta.input_nodes.size,
        ),
        meta.targets.astype("<u4").tobytes(),
    ]
    for dst, src in meta.layers:
        parts.append(struct.pack("<I", dst.size))
        parts.append(dst.astype("<u4").tobytes())
        parts.append(src.astype("<u4").tobytes())
    parts.append(meta.input_nodes.astype("<u4").tobytes())
    parts.append(np.packbits(np.asarray(meta.locality, dtype=bool), bitorder="little").tobytes())
    return b"".join(parts)


def decode_batch(payload: bytes) -> BatchMeta:
    buf = memoryview(payload)
    try:
        epoch, index, n_t, n_l, n_in = _HEAD.unpack_from(buf, 0)
        pos = _HEAD.size

        def take(count):
            nonlocal pos
            end = pos + 4 * count
            if end > len(buf):
                raise BlockFormatError("record payload shorter than its declared contents")
            arr = np.frombuffer(buf[pos:end], dtype="<u4").astype(np.int64)
            pos = end
            return arr

        targets = take(n_t)
        layers = []
        for _ in range(n_l):
            (n_e,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            layers.append((take(n_e), take(n_e)))
        input_nodes = take(n_in)
        nbytes = (n_in + 7) // 8
        bits = np.frombuffer(buf[pos : pos + nbytes], dtype=np.uint8)
        pos += nbytes
    except struct.error as exc:
        raise BlockFormatError(f"record payload truncated: {exc}") from None
    if pos != len(buf) or bits.size != nbytes:
        raise BlockFormatError("record payload length does not match its contents")
    locality = np.unpackbits(bits, count=n_in, bitorder="little").astype(bool)
    return BatchMeta(epoch, index, targets, layers, input_nodes, locality)


@dataclass
class MetadataBlockFile:
    path: Path
    version: int
    worker: int
    batch_counts: list[int]

    @property
    def epochs(self) -> int:
        return len(self.batch_counts)

    @property
    def num_records(self) -> int:
        return sum(self.batch_counts)


class BlockWriter:
    """Incremental writer; each record goes straight to the file.

    Only the per-epoch counters are kept in memory, so resident size does
    not grow with the number of records.
    """

    def __init__(self, path, worker: int, epochs: int, buffer_size: int = 1 << 16):
        self.path = Path(path)
        self.worker = worker
        self.counts = [0] * epochs
        self._last = (-1, -1)
        self._fh = open(self.path, "wb", buffering=buffer_size)
        self._fh.write(MAGIC + struct.pack("<4I", VERSION, 0, worker, epochs))
        self._fh.write(struct.pack(f"<{epochs}I", *self.counts))

    def write(self, meta: BatchMeta) -> None:
        key = (meta.epoch, meta.index)
        if key <= self._last:
            raise ValueError(f"records must arrive in (epoch, index) order; got {key} after {self._last}")
        if not 0 <= meta.epoch < len(self.counts):
            raise ValueError(f"epoch {meta.epoch} outside the declared {len(self.counts)} epochs")
        payload = encode_batch(meta)
        self._fh.write(_REC.pack(len(payload), zlib.crc32(payload)))
        self._fh.write(payload)
        self.counts[meta.epoch] += 1
        self._last = key

    def close(self) -> MetadataBlockFile:
        fh = self._fh
        fh.flush()
        fh.seek(8)
        fh.write(struct.pack("<I", FLAG_COMPLETE))
        fh.seek(20)
        fh.write(struct.pack(f"<{len(self.counts)}I", *self.counts))
        fh.close()
        return MetadataBlockFile(self.path, VERSION, self.worker, list(self.counts))

    def abort(self) -> None:
        # leaves the completion flag clear
        self._fh.close()


def write_blocks(stream: Iterable[BatchMeta], path, worker: int = 0, epochs: int | None = None) -> MetadataBlockFile:
    """Stream ``BatchMeta`` records to ``path``.

    ``epochs`` sizes the header; when omitted the stream is materialised to
    find the largest epoch, so pass it for long streams.
    """
    if epochs is None:
        stream = list(stream)
        epochs = 1 + max((m.epoch for m in stream), default=-1)
    writer = BlockWriter(path, worker, epochs)
    try:
        for meta in stream:
            writer.write(meta)
    except BaseException:
        writer.abort()
        raise
    return writer.close()


def read_header(fh) -> MetadataBlockFile:
    head = fh.read(20)
    if len(head) < 20:
        raise BlockFormatError("file shorter than the fixed header")
    if head[:4] != MAGIC:
        raise BlockFormatError(f"bad magic {head[:4]!r}")
    version, flags, worker, epochs = struct.unpack("<4I", head[4:])
    if version != VERSION:
        raise BlockFormatError(f"unsupported version {version}")
    if not flags & FLAG_COMPLETE:
        raise BlockFormatError("file is incomplete (writer did not finish)")
    raw = fh.read(4 * epochs)
    if len(raw) != 4 * epochs:
        raise BlockFormatError("header truncated in batch counts")
    counts = list(struct.unpack(f"<{epochs}I", raw))
    return MetadataBlockFile(Path(getattr(fh, "name", "")), version, worker, counts)


def open_blocks(path) -> MetadataBlockFile:
    with open(path, "rb") as fh:
        info = read_header(fh)
    info.path = Path(path)
    return info


def stream_blocks(path, epoch: int | None = None) -> Iterator[BatchMeta]:
    """Lazily decode records in stored order.

    Each call opens its own file handle, so several cursors can walk the same
    file independently. With ``epoch`` set, other epochs are skipped without
    decoding.
    """
    with open(path, "rb", buffering=1 << 16) as fh:
        info = read_header(fh)
        for k in range(info.num_records):
            head = fh.read(_REC.size)
            if len(head) < _REC.size:
                raise BlockFormatError(f"record {k}: truncated length prefix")
            length, crc = _REC.unpack(head)
            if epoch is not None:
                peek = fh.read(4)
                if len(peek) == 4 and struct.unpack("<I", peek)[0] != epoch:
                    fh.seek(length - 4, io.SEEK_CUR)
                    continue
                payload = peek + fh.read(length - 4)
            else:
                payload = fh.read(length)
            if len(payload) != length:
                raise BlockFormatError(f"record {k}: payload truncated ({len(payload)} of {length} bytes)")
            if zlib.crc32(payload) != crc:
                raise BlockFormatError(f"record {k}: checksum mismatch")
            try:
                yield decode_batch(payload)
            except BlockFormatError as exc:
                raise BlockFormatError(f"record {k}: {exc}") from None
        if fh.read(1):
            raise BlockFormatError("trailing bytes after the last record")


@dataclass(frozen=True)
class FrequencyTable:
    """Remote node id -> number of batches that reference it."""

    ids: np.ndarray
    counts: np.ndarray

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.counts.tolist()))

    def __len__(self):
        return int(self.ids.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def compute_frequency(blocks: Iterable[BatchMeta]) -> FrequencyTable:
    """Count, per remote node, the batches whose input set contains it."""
    chunks = [m.input_nodes[~m.locality] for m in blocks]
    if not chunks:
        return FrequencyTable(np.empty(0, np.int64), np.empty(0, np.int64))
    ids, counts = np.unique(np.concatenate(chunks), return_counts=True)
    return FrequencyTable(ids.astype(np.int64), counts.astype(np.int64))


def select_hot(ft: FrequencyTable, n_hot: int) -> np.ndarray:
    """Top ``n_hot`` ids by count, ties to the smaller id; returned sorted."""
    if n_hot < 0:
        raise ValueError("n_hot must be >= 0")
    order = np.lexsort((ft.ids, -ft.counts))
    return np.sort(ft.ids[order[:n_hot]])


def hot_coverage(ft: FrequencyTable, hot: np.ndarray) -> float:
    """Fraction of remote accesses that ``hot`` would serve."""
    if ft.total == 0:
        return 1.0
    return float(ft.counts[np.isin(ft.ids, hot)].sum()) / ft.total


def frequency_histogram(ft: FrequencyTable) -> dict[int, int]:
    """Access count -> number of nodes with that count."""
    hist: dict[int, int] = defaultdict(int)
    for c in ft.counts.tolist():
        hist[c] += 1
    return dict(sorted(hist.items()))
