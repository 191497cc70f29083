"""Shared-memory shuffle between a map stage and a reduce stage.

Each map task partitions its records by reducer, optionally sorts them,
and writes them into chains of data buckets allocated from the pool. An
index bucket records the head of every per-reducer chain, and its
GlobalRef is published in the session registry. Reducers walk the chains
of every map directly in shared memory; nothing is serialized or copied
through a channel.

Record wire layout inside a bucket (little endian, packed)::

    key_kind u8 (0 int64, 1 float64, 2 bytes)
    int64/float64 key: 8 bytes          bytes key: key_len u32 + key bytes
    value_len u32 + value bytes

Bucket: ``reducer_id u64 | entry_count u64 | next_bucket u64 | payload_len u64 | payload``.
Index bucket: ``map_id u64`` then per reducer ``first_bucket u64 | total_entries u64``.
Registry: per map ``index_ref u64 | map_generation u64``.
"""

from __future__ import annotations

import enum
import heapq
import io
import os
import struct
import threading
from dataclasses import dataclass, field
from itertools import groupby
from operator import itemgetter
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from ._kernels import GOLDEN, MASK64, fnv1a64_py, fnv1a_rows
from .broker import Heap, create_heap, destroy_heap, owned_zones
from .errors import BadReducerId, DuplicateMapWrite, StageIncomplete
from .pool import NULL, GlobalRef, PoolHandle, attach

BUCKET_PAYLOAD = 256 << 10
BUCKET_HEADER = 32
_BUCKET = struct.Struct("<QQQQ")
_PAIR = struct.Struct("<QQ")


class Scheme(enum.Enum):
    SORT_MERGE = "sort"
    HASH_MERGE = "hash"
    PASS_THROUGH = "pass"


class KeyKind(enum.IntEnum):
    INT64 = 0
    FLOAT64 = 1
    BYTES = 2


def key_kind_of(key) -> KeyKind:
    if isinstance(key, (bytes, bytearray, memoryview)):
        return KeyKind.BYTES
    if isinstance(key, (float, np.floating)):
        return KeyKind.FLOAT64
    if isinstance(key, (int, np.integer)):
        return KeyKind.INT64
    raise TypeError(f"unsupported key type {type(key).__name__}")


# ---------------------------------------------------------------------------
# columnar records


@dataclass
class RecordBatch:
    """Fixed-shape records: one key kind, one key width, one value width.

    ``keys`` is int64 or float64 of shape (n,), or uint8 of shape (n, key_width)
    for byte keys. ``values`` is uint8 of shape (n, value_width).
    """

    key_kind: KeyKind
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.key_kind = KeyKind(self.key_kind)
        if self.values.ndim != 2 or self.values.dtype != np.uint8:
            raise ValueError("values must be a 2-D uint8 array")
        if len(self.keys) != len(self.values):
            raise ValueError("keys and values differ in length")

    def __len__(self):
        return len(self.keys)

    @property
    def key_width(self) -> int:
        return self.keys.shape[1] if self.key_kind is KeyKind.BYTES else 8

    @property
    def value_width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_arrays(cls, keys, values=None, value_width: int = 0) -> "RecordBatch":
        keys = np.asarray(keys)
        if keys.dtype.kind in "iu":
            kind, keys = KeyKind.INT64, keys.astype("<i8", copy=False)
        elif keys.dtype.kind == "f":
            kind, keys = KeyKind.FLOAT64, keys.astype("<f8", copy=False)
        elif keys.dtype == np.uint8 and keys.ndim == 2:
            kind = KeyKind.BYTES
        else:
            raise TypeError(f"cannot use {keys.dtype} keys")
        if values is None:
            values = np.zeros((len(keys), value_width), np.uint8)
        else:
            values = np.asarray(values)
            if values.ndim == 1:
                values = values.reshape(len(keys), -1)
            values = np.ascontiguousarray(values).view(np.uint8).reshape(len(keys), -1)
        return cls(kind, keys, values)

    @classmethod
    def from_records(cls, records: Sequence[tuple]) -> "RecordBatch | None":
        """Columnar form of ``records`` if they share one shape, else None."""
        if not records:
            return None
        kinds = {key_kind_of(k) for k, _ in records}
        vlens = {len(v) for _, v in records}
        if len(kinds) != 1 or len(vlens) != 1:
            return None
        kind = kinds.pop()
        vw = vlens.pop()
        n = len(records)
        values = np.frombuffer(b"".join(bytes(v) for _, v in records), np.uint8).reshape(n, vw)
        if kind is KeyKind.BYTES:
            klens = {len(k) for k, _ in records}
            if len(klens) != 1:
                return None
            kw = klens.pop()
            keys = np.frombuffer(b"".join(bytes(k) for k, _ in records), np.uint8).reshape(n, kw)
        elif kind is KeyKind.INT64:
            try:
                keys = np.array([k for k, _ in records], dtype="<i8")
            except OverflowError:
                return None
        else:
            keys = np.array([k for k, _ in records], dtype="<f8")
        return cls(kind, keys, values)

    def key_list(self) -> list:
        return _key_list(self.keys, self.key_kind)

    def value_list(self) -> list:
        return row_bytes(self.values)

    def records(self) -> list[tuple]:
        return list(zip(self.key_list(), self.value_list()))

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(self.key_kind, self.keys[idx], self.values[idx])

    @staticmethod
    def concat(batches: Sequence["RecordBatch"]) -> "RecordBatch":
        batches = [b for b in batches if b is not None]
        first = batches[0]
        return RecordBatch(
            first.key_kind,
            np.concatenate([b.keys for b in batches]),
            np.concatenate([b.values for b in batches]),
        )


def row_bytes(rows: np.ndarray) -> list[bytes]:
    """Each row of a 2-D uint8 array as a bytes object."""
    n, w = rows.shape
    if w == 0:
        return [b""] * n
    raw = np.ascontiguousarray(rows).tobytes()
    return [raw[i : i + w] for i in range(0, len(raw), w)]


def _key_list(keys: np.ndarray, kind: KeyKind) -> list:
    return row_bytes(keys) if kind is KeyKind.BYTES else keys.tolist()


def sortable_keys(keys: np.ndarray, kind: KeyKind) -> np.ndarray:
    """1-D array whose order equals key order (bytes keys compare lexicographically)."""
    if kind is KeyKind.BYTES:
        # equal-width null-padded strings order exactly like the raw bytes
        return np.ascontiguousarray(keys).view(f"S{keys.shape[1]}").ravel() if keys.shape[1] else np.zeros(len(keys), "S1")
    return keys


def key_sort_order(batch: RecordBatch) -> np.ndarray:
    return np.argsort(sortable_keys(batch.keys, batch.key_kind), kind="stable")


def wire_dtype(kind: KeyKind, key_width: int, value_width: int) -> np.dtype:
    fields = [("kind", "u1")]
    if kind is KeyKind.BYTES:
        fields += [("klen", "<u4"), ("key", f"V{key_width}")] if key_width else [("klen", "<u4")]
    else:
        fields.append(("key", "<i8" if kind is KeyKind.INT64 else "<f8"))
    fields.append(("vlen", "<u4"))
    if value_width:
        fields.append(("value", f"V{value_width}"))
    return np.dtype(fields)


def encode_record(key, value) -> bytes:
    kind = key_kind_of(key)
    value = bytes(value)
    if kind is KeyKind.INT64:
        return struct.pack("<BqI", 0, key, len(value)) + value
    if kind is KeyKind.FLOAT64:
        return struct.pack("<BdI", 1, key, len(value)) + value
    key = bytes(key)
    return struct.pack("<BI", 2, len(key)) + key + struct.pack("<I", len(value)) + value


def decode_records(buf, count: int | None = None) -> list[tuple]:
    """Parse wire records one at a time."""
    mv = memoryview(buf)
    out = []
    pos = 0
    end = len(mv)
    unpack = struct.unpack_from
    while pos < end and (count is None or len(out) < count):
        kind = mv[pos]
        if kind == 0:
            key, vlen = unpack("<qI", mv, pos + 1)
            pos += 13
        elif kind == 1:
            key, vlen = unpack("<dI", mv, pos + 1)
            pos += 13
        elif kind == 2:
            (klen,) = unpack("<I", mv, pos + 1)
            key = bytes(mv[pos + 5 : pos + 5 + klen])
            (vlen,) = unpack("<I", mv, pos + 5 + klen)
            pos += 9 + klen
        else:
            raise ValueError(f"corrupt record kind {kind} at byte {pos}")
        out.append((key, bytes(mv[pos : pos + vlen])))
        pos += vlen
    return out


# ---------------------------------------------------------------------------
# partitioners


def _mix(u: np.ndarray) -> np.ndarray:
    return (u * np.uint64(GOLDEN)) >> np.uint64(32)


class HashPartitioner:
    """Multiplicative hash of the 8-byte key pattern (FNV-1a for byte keys)."""

    def __init__(self, num_partitions: int):
        self.num_partitions = num_partitions

    def assign(self, batch: RecordBatch) -> np.ndarray:
        return self.assign_keys(batch.keys, batch.key_kind)

    def assign_keys(self, keys: np.ndarray, kind: KeyKind = KeyKind.INT64) -> np.ndarray:
        if kind is KeyKind.BYTES:
            u = fnv1a_rows(np.ascontiguousarray(keys))
        elif kind is KeyKind.FLOAT64:
            u = (np.asarray(keys, "<f8") + 0.0).view(np.uint64)  # -0.0 == 0.0
        else:
            u = np.asarray(keys, "<i8").view(np.uint64)
        return (_mix(u) % np.uint64(self.num_partitions)).astype(np.int64)

    def partition(self, key) -> int:
        kind = key_kind_of(key)
        if kind is KeyKind.BYTES:
            u = fnv1a64_py(key)
        elif kind is KeyKind.FLOAT64:
            u = struct.unpack("<Q", struct.pack("<d", float(key) + 0.0))[0]
        else:
            u = int(key) & MASK64
        return (((u * GOLDEN) & MASK64) >> 32) % self.num_partitions


class IdentityPartitioner:
    """Integer key modulo the partition count."""

    def __init__(self, num_partitions: int):
        self.num_partitions = num_partitions

    def assign(self, batch: RecordBatch) -> np.ndarray:
        return self.assign_keys(batch.keys, batch.key_kind)

    def assign_keys(self, keys, kind=KeyKind.INT64) -> np.ndarray:
        return np.mod(np.asarray(keys, np.int64), self.num_partitions)

    def partition(self, key) -> int:
        return int(key) % self.num_partitions


class RangePartitioner:
    """Reducer i receives keys in (splitters[i-1], splitters[i]]."""

    def __init__(self, splitters: np.ndarray, kind: KeyKind = KeyKind.INT64):
        self.splitters = np.asarray(splitters)
        self.kind = KeyKind(kind)
        self.num_partitions = len(self.splitters) + 1

    @classmethod
    def from_sample(cls, sample: RecordBatch, num_partitions: int) -> "RangePartitioner":
        keys = np.sort(sortable_keys(sample.keys, sample.key_kind), kind="stable")
        if len(keys) == 0 or num_partitions == 1:
            return cls(keys[:0], sample.key_kind)
        pos = (np.arange(1, num_partitions) * len(keys)) // num_partitions
        return cls(keys[np.minimum(pos, len(keys) - 1)], sample.key_kind)

    def assign(self, batch: RecordBatch) -> np.ndarray:
        return self.assign_keys(batch.keys, batch.key_kind)

    def assign_keys(self, keys, kind=KeyKind.INT64) -> np.ndarray:
        return np.searchsorted(self.splitters, sortable_keys(keys, kind), side="left").astype(np.int64)

    def partition(self, key) -> int:
        if self.kind is KeyKind.BYTES:
            probe = np.array([bytes(key)], dtype=self.splitters.dtype)
        else:
            probe = np.array([key], dtype=self.splitters.dtype)
        return int(np.searchsorted(self.splitters, probe, side="left")[0])


# ---------------------------------------------------------------------------
# key/value buffer pool


class BufferPool:
    """Process-local staging buffers recycled across map tasks.

    A miss evicts every idle buffer before allocating, so the resident
    footprint never exceeds the largest single task's demand.
    """

    def __init__(self, min_size: int = 4096):
        self.min_size = min_size
        self._idle: list[np.ndarray] = []
        self._lock = threading.Lock()
        self.outstanding = 0
        self.allocations = 0
        self.allocated_bytes = 0
        self.peak_resident = 0

    @property
    def resident(self) -> int:
        return self.outstanding + sum(b.nbytes for b in self._idle)

    def acquire(self, nbytes: int) -> np.ndarray:
        with self._lock:
            fits = [i for i, b in enumerate(self._idle) if b.nbytes >= nbytes]
            if fits:
                buf = self._idle.pop(min(fits, key=lambda i: self._idle[i].nbytes))
            else:
                self._idle.clear()
                size = max(self.min_size, 1 << max(0, nbytes - 1).bit_length())
                buf = np.empty(size, np.uint8)
                self.allocations += 1
                self.allocated_bytes += size
            self.outstanding += buf.nbytes
            self.peak_resident = max(self.peak_resident, self.resident)
            return buf

    def release(self, buf: np.ndarray) -> None:
        with self._lock:
            self.outstanding -= buf.nbytes
            self._idle.append(buf)


default_buffers = BufferPool()


# ---------------------------------------------------------------------------
# session


@dataclass
class ShuffleSession:
    """Picklable descriptor of one shuffle; worker processes re-attach the pool by path."""

    session_id: int
    scheme: Scheme
    num_maps: int
    num_reduces: int
    pool_path: str
    registry_ref: int
    partitioner: object = None
    released: bool = False
    _pool: PoolHandle | None = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_pool"] = None
        return state

    @property
    def pool(self) -> PoolHandle:
        if self._pool is None or self._pool._closed:
            self._pool = attach(self.pool_path)
        return self._pool

    def slot(self, map_id: int) -> tuple[int, int]:
        return _PAIR.unpack_from(self.pool.data, self.registry_ref + 16 * map_id)

    def complete(self) -> bool:
        return not self.released and all(self.slot(m)[0] for m in range(self.num_maps))


def create_session(
    pool: PoolHandle,
    heap: Heap,
    scheme: Scheme,
    num_maps: int,
    num_reduces: int,
    partitioner=None,
) -> ShuffleSession:
    if num_maps < 1 or num_reduces < 1:
        raise ValueError("a shuffle needs at least one map and one reducer")
    scheme = Scheme(scheme)
    registry = heap.malloc(16 * num_maps)
    pool.u8[registry : registry + 16 * num_maps] = 0
    if partitioner is None:
        partitioner = HashPartitioner(num_reduces)
    if partitioner.num_partitions != num_reduces:
        raise ValueError("partitioner and session disagree on the reducer count")
    return ShuffleSession(heap.generation, scheme, num_maps, num_reduces, str(pool.path), registry, partitioner, _pool=pool)


def _sorted_order(batch: RecordBatch, rid: np.ndarray, scheme: Scheme) -> np.ndarray:
    if scheme is Scheme.SORT_MERGE:
        by_key = key_sort_order(batch)
        return by_key[np.argsort(rid[by_key], kind="stable")]
    return np.argsort(rid, kind="stable")


class _BucketWriter:
    def __init__(self, pool: PoolHandle, heap: Heap, reducer: int, hint):
        self.pool, self.heap, self.reducer, self.hint = pool, heap, reducer, hint
        self.first = NULL
        self.last = NULL
        self.entries = 0

    def new_bucket(self, entries: int, payload_len: int) -> int:
        ref = self.heap.malloc(BUCKET_HEADER + payload_len, self.hint)
        _BUCKET.pack_into(self.pool.data, ref, self.reducer, entries, NULL, payload_len)
        if self.last:
            struct.pack_into("<Q", self.pool.data, self.last + 16, ref)
        else:
            self.first = ref
        self.last = ref
        self.entries += entries
        return ref + BUCKET_HEADER


def map_write(
    session: ShuffleSession,
    map_id: int,
    records: RecordBatch | Iterable[tuple],
    hint: int | None = None,
    buffers: BufferPool | None = None,
) -> GlobalRef:
    """Write one map task's output and publish its index bucket."""
    if not 0 <= map_id < session.num_maps:
        raise ValueError(f"map id {map_id} outside [0, {session.num_maps})")
    pool = session.pool
    if session.slot(map_id)[0]:
        raise DuplicateMapWrite(f"map {map_id} already wrote its output")
    batch = records if isinstance(records, RecordBatch) else None
    generic = None
    if batch is None:
        generic = list(records)
        batch = RecordBatch.from_records(generic)
        if batch is not None:
            generic = None
    heap = create_heap(pool)
    R = session.num_reduces
    try:
        if generic is not None:
            writers = _write_generic(session, pool, heap, generic, hint)
        elif batch is not None and len(batch):
            writers = _write_batch(session, pool, heap, batch, hint, buffers or default_buffers)
        else:
            writers = [_BucketWriter(pool, heap, r, hint) for r in range(R)]
        index = heap.malloc(8 + 16 * R, hint)
        struct.pack_into("<Q", pool.data, index, map_id)
        for r, w in enumerate(writers):
            _PAIR.pack_into(pool.data, index + 8 + 16 * r, w.first, w.entries)
        slot = session.registry_ref + 16 * map_id
        with pool.lock():
            if pool.read_u64(slot):
                raise DuplicateMapWrite(f"map {map_id} already wrote its output")
            pool.write_u64(slot + 8, heap.generation)
            # publication word goes last; readers test it before anything else
            pool.write_u64(slot, index)
    except BaseException:
        destroy_heap(pool, heap.generation)
        raise
    return GlobalRef(index)


def _write_batch(session, pool, heap, batch: RecordBatch, hint, buffers: BufferPool):
    R = session.num_reduces
    n = len(batch)
    rid = session.partitioner.assign(batch)
    order = _sorted_order(batch, rid, session.scheme)
    counts = np.bincount(rid, minlength=R)
    kw, vw = batch.key_width, batch.value_width
    # stage the reordered keys and values in pooled buffers (the K/V buffer)
    kbytes = n * (kw if batch.key_kind is KeyKind.BYTES else 8)
    kbuf, vbuf = buffers.acquire(max(kbytes, 1)), buffers.acquire(max(n * vw, 1))
    try:
        if batch.key_kind is KeyKind.BYTES:
            keys = kbuf[:kbytes].reshape(n, kw)
        else:
            keys = kbuf[:kbytes].view(batch.keys.dtype)
        np.take(batch.keys, order, axis=0, out=keys)
        values = vbuf[: n * vw].reshape(n, vw)
        np.take(batch.values, order, axis=0, out=values)
        wire = wire_dtype(batch.key_kind, kw, vw)
        per_bucket = max(1, BUCKET_PAYLOAD // wire.itemsize)
        writers = []
        pos = 0
        for r in range(R):
            w = _BucketWriter(pool, heap, r, hint)
            end = pos + int(counts[r])
            for s in range(pos, end, per_bucket):
                e = min(end, s + per_bucket)
                at = w.new_bucket(e - s, (e - s) * wire.itemsize)
                recs = np.frombuffer(pool.data, wire, e - s, at)
                recs["kind"] = batch.key_kind
                if batch.key_kind is KeyKind.BYTES:
                    recs["klen"] = kw
                    if kw:
                        recs["key"] = keys[s:e].view(f"V{kw}").ravel()
                else:
                    recs["key"] = keys[s:e]
                recs["vlen"] = vw
                if vw:
                    recs["value"] = values[s:e].view(f"V{vw}").ravel()
                del recs
            writers.append(w)
            pos = end
    finally:
        buffers.release(kbuf)
        buffers.release(vbuf)
    return writers


def _write_generic(session, pool, heap, records: list, hint):
    R = session.num_reduces
    part = session.partitioner
    per_reducer: list[list] = [[] for _ in range(R)]
    for key, value in records:
        per_reducer[part.partition(key)].append((key, value))
    writers = []
    for r, recs in enumerate(per_reducer):
        if session.scheme is Scheme.SORT_MERGE:
            recs.sort(key=itemgetter(0))
        w = _BucketWriter(pool, heap, r, hint)
        chunk, size = [], 0
        for key, value in recs:
            enc = encode_record(key, value)
            if chunk and size + len(enc) > BUCKET_PAYLOAD:
                _flush_generic(pool, w, chunk, size)
                chunk, size = [], 0
            chunk.append(enc)
            size += len(enc)
        if chunk:
            _flush_generic(pool, w, chunk, size)
        writers.append(w)
    return writers


def _flush_generic(pool, w: _BucketWriter, chunk: list[bytes], size: int) -> None:
    at = w.new_bucket(len(chunk), size)
    pool.data[at : at + size] = b"".join(chunk)


# ---------------------------------------------------------------------------
# reduce side


def _check_reader(session: ShuffleSession, reduce_id: int) -> None:
    if not 0 <= reduce_id < session.num_reduces:
        raise BadReducerId(f"reducer {reduce_id} outside [0, {session.num_reduces})")
    if session.released:
        raise StageIncomplete("session already released")
    missing = [m for m in range(session.num_maps) if not session.slot(m)[0]]
    if missing:
        raise StageIncomplete(f"maps {missing[:8]} have not published output")


def _chain(pool: PoolHandle, index_ref: int, reduce_id: int) -> Iterator[tuple[int, int, int]]:
    first, _ = _PAIR.unpack_from(pool.data, index_ref + 8 + 16 * reduce_id)
    ref = first
    while ref:
        _, entries, nxt, payload_len = _BUCKET.unpack_from(pool.data, ref)
        yield ref + BUCKET_HEADER, entries, payload_len
        ref = nxt


def _bucket_batch(pool: PoolHandle, at: int, entries: int, payload_len: int) -> RecordBatch | None:
    """Zero-copy columnar view of a bucket whose records share one shape."""
    if entries == 0:
        return None
    u8 = pool.u8
    kind = int(u8[at])
    if kind == KeyKind.BYTES:
        kw = int(u8[at + 1 : at + 5].view("<u4")[0])
        vw = int(u8[at + 5 + kw : at + 9 + kw].view("<u4")[0])
    elif kind in (KeyKind.INT64, KeyKind.FLOAT64):
        kw = 8
        vw = int(u8[at + 9 : at + 13].view("<u4")[0])
    else:
        raise ValueError(f"corrupt record kind {kind}")
    kind = KeyKind(kind)
    wire = wire_dtype(kind, kw, vw)
    if wire.itemsize * entries != payload_len:
        return None
    recs = np.frombuffer(pool.data, wire, entries, at)
    if (recs["kind"] != kind).any() or (recs["vlen"] != vw).any():
        return None
    if kind is KeyKind.BYTES:
        if (recs["klen"] != kw).any():
            return None
        keys = np.frombuffer(recs["key"].tobytes(), np.uint8).reshape(entries, kw) if kw else np.zeros((entries, 0), np.uint8)
    else:
        keys = recs["key"]
    values = np.frombuffer(recs["value"].tobytes(), np.uint8).reshape(entries, vw) if vw else np.zeros((entries, 0), np.uint8)
    return RecordBatch(kind, keys, values)


def read_map_output(session: ShuffleSession, map_id: int, reduce_id: int) -> RecordBatch | list[tuple] | None:
    """One map's records for one reducer: a batch when uniform, else a record list."""
    pool = session.pool
    index_ref, _ = session.slot(map_id)
    parts = []
    for at, entries, payload_len in _chain(pool, index_ref, reduce_id):
        b = _bucket_batch(pool, at, entries, payload_len)
        parts.append(b if b is not None else decode_records(pool.data[at : at + payload_len], entries))
    if not parts:
        return None
    if all(isinstance(p, RecordBatch) for p in parts):
        shapes = {(p.key_kind, p.key_width, p.value_width) for p in parts}
        if len(shapes) == 1:
            return RecordBatch.concat(parts)
    out = []
    for p in parts:
        out.extend(p.records() if isinstance(p, RecordBatch) else p)
    return out


def merge_stream(scheme: Scheme, per_map: Sequence[list[tuple]]) -> Iterator:
    """Reduce-side combine of per-map record lists (shared by both engines)."""
    scheme = Scheme(scheme)
    if scheme is Scheme.PASS_THROUGH:
        for recs in per_map:
            yield from recs
    elif scheme is Scheme.SORT_MERGE:
        # priority-queue merge; ties resolve to the earlier map
        merged = heapq.merge(*per_map, key=itemgetter(0))
        for key, grp in groupby(merged, key=itemgetter(0)):
            yield key, [v for _, v in grp]
    else:
        table: dict = {}
        for recs in per_map:
            for key, value in recs:
                table.setdefault(key, []).append(value)
        yield from table.items()


def reduce_read(session: ShuffleSession, reduce_id: int) -> Iterator:
    """Stream of (key, [values]) for merge schemes, (key, value) for pass-through."""
    _check_reader(session, reduce_id)
    per_map = []
    for m in range(session.num_maps):
        out = read_map_output(session, m, reduce_id)
        per_map.append(out.records() if isinstance(out, RecordBatch) else (out or []))
    return merge_stream(session.scheme, per_map)


@dataclass
class ReduceOutput:
    """Columnar reducer output. ``offsets`` delimit value groups of ``keys``;
    it is None for pass-through, where keys and values pair up one to one."""

    scheme: Scheme
    key_kind: KeyKind
    keys: np.ndarray
    values: np.ndarray
    offsets: np.ndarray | None

    def __len__(self):
        return len(self.keys)

    def key_list(self) -> list:
        return _key_list(self.keys, self.key_kind)

    def groups(self) -> Iterator:
        keys = self.key_list()
        vals = row_bytes(self.values)
        if self.offsets is None:
            yield from zip(keys, vals)
            return
        for i, key in enumerate(keys):
            yield key, vals[self.offsets[i] : self.offsets[i + 1]]

    def fold(self, ufunc: np.ufunc, dtype="<i8") -> np.ndarray:
        """Apply ``ufunc.reduceat`` to each group's values interpreted as ``dtype``."""
        vals = np.ascontiguousarray(self.values).view(dtype)
        if len(self.keys) == 0:
            out = vals[:0]
        else:
            out = ufunc.reduceat(vals, self.offsets[:-1], axis=0)
        return out[:, 0] if out.shape[1] == 1 else out


def group_sorted(batch: RecordBatch, scheme: Scheme) -> ReduceOutput:
    """Group an already-ordered batch (sort-merge output) at key changes."""
    skeys = sortable_keys(batch.keys, batch.key_kind)
    n = len(batch)
    if n == 0:
        return ReduceOutput(scheme, batch.key_kind, batch.keys, batch.values, np.zeros(1, np.int64))
    change = np.flatnonzero(skeys[1:] != skeys[:-1]) + 1
    starts = np.concatenate(([0], change))
    offsets = np.concatenate((starts, [n])).astype(np.int64)
    return ReduceOutput(scheme, batch.key_kind, batch.keys[starts], batch.values, offsets)


def hash_group(batch: RecordBatch) -> ReduceOutput:
    """Hash-table grouping: one entry per distinct key, first-seen key order."""
    if batch.key_kind is KeyKind.BYTES:
        codes, _ = pd.factorize(pd.Series(batch.key_list(), dtype=object), sort=False)
    else:
        codes, _ = pd.factorize(batch.keys, sort=False)
    order = np.argsort(codes, kind="stable")
    counts = np.bincount(codes)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    first = order[offsets[:-1]]
    return ReduceOutput(Scheme.HASH_MERGE, batch.key_kind, batch.keys[first], batch.values[order], offsets)


def combine_batches(scheme: Scheme, batches: Sequence[RecordBatch]) -> ReduceOutput:
    """Columnar equivalent of :func:`merge_stream` over fixed-shape map outputs."""
    scheme = Scheme(scheme)
    batch = RecordBatch.concat(batches)
    if scheme is Scheme.PASS_THROUGH:
        return ReduceOutput(scheme, batch.key_kind, batch.keys, batch.values, None)
    if scheme is Scheme.SORT_MERGE:
        # concatenation in map order + stable sort == k-way merge with map tie-break
        return group_sorted(batch.take(key_sort_order(batch)), scheme)
    return hash_group(batch)


def reduce_columns(session: ShuffleSession, reduce_id: int) -> ReduceOutput | None:
    """Vectorized reduce for sessions whose records share one shape.

    Returns None when the reducer received nothing; raises TypeError when
    map outputs are not columnar (use :func:`reduce_read`).
    """
    _check_reader(session, reduce_id)
    batches = []
    for m in range(session.num_maps):
        out = read_map_output(session, m, reduce_id)
        if out is None:
            continue
        if not isinstance(out, RecordBatch):
            raise TypeError("map output is not fixed-shape; use reduce_read")
        batches.append(out)
    if not batches:
        return None
    return combine_batches(session.scheme, batches)


def release_session(session: ShuffleSession) -> None:
    """Bulk-free all bucket heaps and the session heap."""
    if session.released:
        return
    pool = session.pool
    gens = []
    if session.registry_ref and pool.zone_of(session.registry_ref) in owned_zones(pool, session.session_id):
        for m in range(session.num_maps):
            index_ref, gen = session.slot(m)
            if gen:
                gens.append(gen)
        pool.u8[session.registry_ref : session.registry_ref + 16 * session.num_maps] = 0
    for gen in gens:
        destroy_heap(pool, gen)
    destroy_heap(pool, session.session_id)
    session.released = True


# ---------------------------------------------------------------------------
# serialized-copy baseline


def serialize_records(records: Iterable[tuple]) -> bytes:
    """Serialize record by record, as a socket-based shuffle does."""
    out = io.BytesIO()
    for key, value in records:
        out.write(encode_record(key, value))
    return out.getvalue()


def _pipe_copy(payload: bytes) -> bytes:
    """Push bytes through an OS pipe and read them back on the other side."""
    r, w = os.pipe()

    def pump():
        with os.fdopen(w, "wb") as f:
            f.write(payload)

    t = threading.Thread(target=pump)
    t.start()
    with os.fdopen(r, "rb") as f:
        data = f.read()
    t.join()
    return data


def baseline_map(records: Iterable[tuple], scheme: Scheme, partitioner) -> list[bytes]:
    """Partition (and for sort-merge, sort) one map's records into serialized blobs."""
    per_reducer: list[list] = [[] for _ in range(partitioner.num_partitions)]
    for key, value in records:
        per_reducer[partitioner.partition(key)].append((key, value))
    if Scheme(scheme) is Scheme.SORT_MERGE:
        for recs in per_reducer:
            recs.sort(key=itemgetter(0))
    return [serialize_records(recs) for recs in per_reducer]


def baseline_shuffle(
    records: Sequence[Iterable[tuple]],
    num_maps: int,
    num_reduces: int,
    scheme: Scheme,
    partitioner=None,
) -> list[list]:
    """Reference shuffle that serializes, copies and deserializes every record.

    ``records`` holds one record iterable per map. Returns each reducer's
    output with the same contract as :func:`reduce_read`.
    """
    if num_maps < 1 or num_reduces < 1:
        raise ValueError("a shuffle needs at least one map and one reducer")
    if len(records) != num_maps:
        raise ValueError(f"expected {num_maps} map inputs, got {len(records)}")
    scheme = Scheme(scheme)
    partitioner = partitioner or HashPartitioner(num_reduces)
    blobs = [baseline_map(recs, scheme, partitioner) for recs in records]
    out = []
    for r in range(num_reduces):
        per_map = [decode_records(_pipe_copy(blobs[m][r])) for m in range(num_maps)]
        out.append(list(merge_stream(scheme, per_map)))
    return out
