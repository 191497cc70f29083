"""Off-heap attribute store.

An attribute partition keeps its records as one contiguous key-sorted array
in the pool, next to an open-addressing hash index over the same records.
Payloads are fixed width and mutable in place; the key set is fixed at
build time. Every process holding the partition's GlobalRef can read it.

Record layout: ``key i64 | attr_0 | ... | attr_k-1 | version u64``. The
version word is bumped after every payload write.

Partition header (little endian, packed)::

    partition_id u64 | entry_count u64 | attr_count u32 | width u32 * attr_count
    | records_ref u64 | index_ref u64 | table_size u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .broker import Heap
from .errors import (
    DuplicateKey,
    DuplicatePartitionId,
    KeyAbsent,
    UnsortedInput,
    WidthMismatch,
)
from .pool import NULL, GlobalRef, PoolHandle, attach

MAX_LOAD = 0.7
KEY_WIDTH = 8
VERSION_WIDTH = 8


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple((str(n), int(w)) for n, w in self.attributes))
        if not self.attributes:
            raise ValueError("a schema needs at least one attribute")
        if any(w <= 0 for _, w in self.attributes):
            raise ValueError("attribute widths must be positive")

    @classmethod
    def of(cls, **widths: int) -> "AttributeSchema":
        return cls(tuple(widths.items()))

    @property
    def widths(self) -> list[int]:
        return [w for _, w in self.attributes]

    @property
    def payload_width(self) -> int:
        return sum(self.widths)

    @property
    def raw_width(self) -> int:
        """Key plus attributes: the bytes a record carries."""
        return KEY_WIDTH + self.payload_width

    @property
    def record_width(self) -> int:
        return self.raw_width + VERSION_WIDTH

    def offset(self, index: int) -> int:
        return KEY_WIDTH + sum(self.widths[:index])

    def index(self, attribute: int | str) -> int:
        if isinstance(attribute, str):
            return [n for n, _ in self.attributes].index(attribute)
        return attribute


def table_bits(n: int) -> int:
    bits = 3
    while n > MAX_LOAD * (1 << bits):
        bits += 1
    return bits


def _header_struct(attr_count: int) -> struct.Struct:
    return struct.Struct(f"<QQI{attr_count}IQQQ")


class AttributePartition:
    """Process-local handle on a partition living in the pool."""

    def __init__(self, pool: PoolHandle, ref: int, schema: AttributeSchema | None = None):
        self.pool = pool
        self.ref = GlobalRef(ref)
        pid, n, count = struct.unpack_from("<QQI", pool.data, ref)
        fields = _header_struct(count).unpack_from(pool.data, ref)
        widths = fields[3 : 3 + count]
        self.partition_id = pid
        self.entry_count = n
        self.records_ref, self.index_ref, self.table_size = fields[3 + count :]
        if schema is None:
            schema = AttributeSchema(tuple((f"attr{i}", w) for i, w in enumerate(widths)))
        elif schema.widths != list(widths):
            raise WidthMismatch(f"schema widths {schema.widths} differ from stored {list(widths)}")
        self.schema = schema
        self.bits = self.table_size.bit_length() - 1

    def __len__(self):
        return self.entry_count

    def __reduce__(self):
        # worker processes re-attach the pool by path
        return _reopen, (AttributePartition, str(self.pool.path), int(self.ref), self.schema)

    def __repr__(self):
        return f"AttributePartition(id={self.partition_id}, entries={self.entry_count}, ref={self.ref:#x})"

    # -- raw views ------------------------------------------------------
    def _strided(self, offset: int, dtype, width_items: int | None = None) -> np.ndarray:
        dtype = np.dtype(dtype)
        shape = (self.entry_count,) if width_items is None else (self.entry_count, width_items)
        strides = (self.schema.record_width,) if width_items is None else (self.schema.record_width, dtype.itemsize)
        return np.ndarray(shape, dtype, buffer=self.pool.data, offset=self.records_ref + offset, strides=strides)

    @property
    def keys(self) -> np.ndarray:
        return self._strided(0, "<i8")

    @property
    def versions(self) -> np.ndarray:
        return self._strided(self.schema.raw_width, "<u8")

    @property
    def index_table(self) -> np.ndarray:
        return np.frombuffer(self.pool.data, "<i4", self.table_size, self.index_ref)

    def record_array(self) -> np.ndarray:
        """Writable (entry_count, record_width) uint8 view of all records."""
        nbytes = self.entry_count * self.schema.record_width
        return np.frombuffer(self.pool.data, np.uint8, nbytes, self.records_ref).reshape(
            self.entry_count, self.schema.record_width
        )

    def column(self, attribute: int | str, dtype=np.uint8) -> np.ndarray:
        """Writable strided view of one attribute for every record."""
        i = self.schema.index(attribute)
        dtype = np.dtype(dtype)
        width = self.schema.widths[i]
        if width % dtype.itemsize:
            raise WidthMismatch(f"attribute width {width} is not a multiple of {dtype}")
        return self._strided(self.schema.offset(i), dtype, width // dtype.itemsize)

    def payloads(self) -> np.ndarray:
        return self.record_array()[:, KEY_WIDTH : self.schema.raw_width]

    # -- point access ---------------------------------------------------
    def position(self, key: int) -> int:
        """Record index of ``key`` via the hash index, or -1."""
        q = np.array([key], dtype=np.int64)
        return int(_kernels.probe_many(self.index_table, self.keys, q, self.bits)[0])

    def positions(self, keys) -> np.ndarray:
        q = np.ascontiguousarray(keys, dtype=np.int64)
        return _kernels.probe_many(self.index_table, np.ascontiguousarray(self.keys), q, self.bits)

    def bisect(self, key: int) -> int:
        """Record index of ``key`` by binary search over the sorted array, or -1."""
        keys = self.keys
        i = int(np.searchsorted(keys, key))
        return i if i < len(keys) and keys[i] == key else -1

    def lookup(self, key: int) -> bytes | None:
        pos = self.position(key)
        if pos < 0:
            return None
        return self.record_array()[pos, KEY_WIDTH : self.schema.raw_width].tobytes()

    def scan(self, key_lo: int, key_hi: int) -> Iterator[tuple[int, bytes]]:
        if key_lo > key_hi:
            raise ValueError("key_lo must not exceed key_hi")
        keys = self.keys
        lo = int(np.searchsorted(keys, key_lo, side="left"))
        hi = int(np.searchsorted(keys, key_hi, side="right"))
        recs = self.record_array()
        for i in range(lo, hi):
            yield int(keys[i]), recs[i, KEY_WIDTH : self.schema.raw_width].tobytes()

    def update_in_place(self, key: int, attribute: int | str, new_bytes) -> None:
        i = self.schema.index(attribute)
        new_bytes = bytes(new_bytes)
        width = self.schema.widths[i]
        if len(new_bytes) != width:
            raise WidthMismatch(f"attribute {i} is {width} bytes, got {len(new_bytes)}")
        pos = self.position(key)
        if pos < 0:
            raise KeyAbsent(key)
        rec = self.records_ref + pos * self.schema.record_width
        off = rec + self.schema.offset(i)
        self.pool.data[off : off + width] = new_bytes
        vref = rec + self.schema.raw_width
        self.pool.write_u64(vref, self.pool.read_u64(vref) + 1)

    def update_column(self, attribute: int | str, values: np.ndarray, dtype=np.uint8) -> None:
        """Overwrite one attribute of every record, then bump every version word."""
        col = self.column(attribute, dtype)
        col[...] = np.asarray(values, dtype).reshape(col.shape)
        self.versions[...] += np.uint64(1)


def _reopen(cls, path: str, *args):
    return cls(attach(path), *args)


def _validate_keys(keys: np.ndarray) -> None:
    if len(keys) < 2:
        return
    # compare, not subtract: differences of extreme keys overflow
    bad = np.flatnonzero(keys[1:] <= keys[:-1])
    if bad.size:
        i = int(bad[0])
        if keys[i + 1] == keys[i]:
            raise DuplicateKey(f"key {keys[i]} appears twice")
        raise UnsortedInput(f"key {keys[i + 1]} follows {keys[i]}")


def _records_from(records, schema: AttributeSchema) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(records, tuple) and len(records) == 2 and isinstance(records[0], np.ndarray):
        keys, payloads = records
        keys = np.ascontiguousarray(keys, np.int64)
        payloads = np.ascontiguousarray(payloads)
        if len(keys):
            payloads = payloads.view(np.uint8).reshape(len(keys), -1)
        else:
            payloads = np.zeros((0, schema.payload_width), np.uint8)
    else:
        recs = list(records)
        keys = np.array([k for k, _ in recs], dtype=np.int64)
        raw = [bytes(p) for _, p in recs]
        if any(len(p) != schema.payload_width for p in raw):
            raise WidthMismatch(f"payloads must be {schema.payload_width} bytes")
        payloads = np.frombuffer(b"".join(raw), np.uint8).reshape(len(recs), schema.payload_width)
    if payloads.shape[1] != schema.payload_width:
        raise WidthMismatch(f"payloads are {payloads.shape[1]} bytes, schema needs {schema.payload_width}")
    return keys, payloads


def build_partition(
    heap: Heap,
    partition_id: int,
    schema: AttributeSchema,
    records: Iterable[tuple[int, bytes]] | tuple[np.ndarray, np.ndarray],
    hint: int | None = None,
) -> GlobalRef:
    """Lay out key-sorted records contiguously and index them.

    ``records`` is an iterable of (key, payload bytes) or a pair of arrays
    (keys, payloads) with payloads shaped (n, payload_width).
    """
    keys, payloads = _records_from(records, schema)
    _validate_keys(keys)
    n = len(keys)
    R = schema.record_width
    raw = np.zeros((n, R), np.uint8)
    raw[:, :KEY_WIDTH] = keys.view(np.uint8).reshape(n, KEY_WIDTH)
    raw[:, KEY_WIDTH : schema.raw_width] = payloads
    return _materialize(heap, partition_id, schema, keys, raw, hint)


def build_partition_from_records(
    heap: Heap, partition_id: int, schema: AttributeSchema, record_bytes, hint: int | None = None
) -> GlobalRef:
    """Rebuild a partition from a raw record array (as written by a checkpoint)."""
    raw = np.frombuffer(record_bytes, np.uint8)
    R = schema.record_width
    if raw.size % R:
        raise WidthMismatch(f"{raw.size} bytes is not a whole number of {R}-byte records")
    raw = raw.reshape(-1, R)
    keys = np.ascontiguousarray(raw[:, :KEY_WIDTH]).view("<i8").ravel()
    _validate_keys(keys)
    return _materialize(heap, partition_id, schema, keys, raw, hint)


def _materialize(heap, partition_id, schema, keys, raw, hint) -> GlobalRef:
    pool = heap.pool
    n = len(keys)
    widths = schema.widths
    hdr = _header_struct(len(widths))
    bits = table_bits(n)
    table = _kernels.build_index(keys, bits)
    # header, records and index come from the same heap and hint: co-located
    header_ref = heap.malloc(hdr.size, hint)
    records_ref = heap.malloc(max(raw.nbytes, 1), hint) if n else NULL
    index_ref = heap.malloc(table.nbytes, hint)
    if n:
        pool.u8[records_ref : records_ref + raw.nbytes] = raw.reshape(-1)
    pool.u8[index_ref : index_ref + table.nbytes] = table.view(np.uint8)
    hdr.pack_into(pool.data, header_ref, partition_id, n, len(widths), *widths, records_ref, index_ref, len(table))
    return GlobalRef(header_ref)


def open_partition(pool: PoolHandle, ref: int, schema: AttributeSchema | None = None) -> AttributePartition:
    return AttributePartition(pool, ref, schema)


def lookup(partition: AttributePartition, key: int) -> bytes | None:
    return partition.lookup(key)


def scan(partition: AttributePartition, key_lo: int, key_hi: int) -> Iterator[tuple[int, bytes]]:
    return partition.scan(key_lo, key_hi)


def update_in_place(partition: AttributePartition, key: int, attribute: int | str, new_bytes) -> None:
    partition.update_in_place(key, attribute, new_bytes)


# ---------------------------------------------------------------------------
# routing and address tables


class RoutingTable:
    """Dense table of partition header refs indexed by partition id.

    Layout: ``slot_count u64 | header_ref u64 * slot_count``.
    """

    def __init__(self, pool: PoolHandle, ref: int, schema: AttributeSchema | None = None):
        self.pool = pool
        self.ref = GlobalRef(ref)
        self.schema = schema
        (self.slot_count,) = struct.unpack_from("<Q", pool.data, ref)
        self._parts: dict[int, AttributePartition] = {}

    def __reduce__(self):
        return _reopen, (RoutingTable, str(self.pool.path), int(self.ref), self.schema)

    @property
    def refs(self) -> np.ndarray:
        return np.frombuffer(self.pool.data, "<u8", self.slot_count, self.ref + 8)

    def __len__(self):
        return int(np.count_nonzero(self.refs))

    def partition_ids(self) -> list[int]:
        return np.flatnonzero(self.refs).tolist()

    def partition(self, partition_id: int) -> AttributePartition:
        part = self._parts.get(partition_id)
        if part is None:
            if not 0 <= partition_id < self.slot_count or not self.refs[partition_id]:
                raise KeyError(f"no partition {partition_id}")
            part = AttributePartition(self.pool, int(self.refs[partition_id]), self.schema)
            self._parts[partition_id] = part
        return part

    def partitions(self) -> list[AttributePartition]:
        return [self.partition(p) for p in self.partition_ids()]


def build_routing_table(heap: Heap, partition_refs: Sequence[int], schema: AttributeSchema | None = None) -> RoutingTable:
    pool = heap.pool
    ids = [struct.unpack_from("<Q", pool.data, ref)[0] for ref in partition_refs]
    if len(set(ids)) != len(ids):
        raise DuplicatePartitionId(f"partition ids {sorted(ids)} contain duplicates")
    slots = max(ids) + 1 if ids else 0
    ref = heap.malloc(8 + 8 * slots)
    struct.pack_into("<Q", pool.data, ref, slots)
    table = np.frombuffer(pool.data, "<u8", slots, ref + 8)
    table[:] = 0
    for pid, pref in zip(ids, partition_refs):
        table[pid] = pref
    del table
    return RoutingTable(pool, ref, schema)


class AddressTable:
    """Dense array of record refs, aligned with the request order it was built from."""

    def __init__(self, pool: PoolHandle, ref: int, length: int, schema: AttributeSchema):
        self.pool = pool
        self.ref = GlobalRef(ref)
        self.length = length
        self.schema = schema

    def __reduce__(self):
        return _reopen, (AddressTable, str(self.pool.path), int(self.ref), self.length, self.schema)

    def __len__(self):
        return self.length

    @property
    def refs(self) -> np.ndarray:
        if self.length == 0:
            return np.zeros(0, "<u8")
        return np.frombuffer(self.pool.data, "<u8", self.length, self.ref)

    def keys(self) -> np.ndarray:
        """Keys of the referenced records, read through the table."""
        if self.length == 0:
            return np.zeros(0, np.int64)
        return np.frombuffer(self.pool.data, "<i8")[(self.refs // 8).astype(np.int64)]


def build_address_table(
    heap: Heap, routing: RoutingTable, requests, partitioner=None, schema: AttributeSchema | None = None
) -> AddressTable:
    """Resolve each requested key to the GlobalRef of its record."""
    from .shuffle import HashPartitioner

    pool = heap.pool
    keys = np.ascontiguousarray(requests, dtype=np.int64)
    partitioner = partitioner or HashPartitioner(routing.slot_count)
    schema = schema or routing.schema or routing.partition(routing.partition_ids()[0]).schema
    refs = np.zeros(len(keys), np.uint64)
    owner = partitioner.assign_keys(keys) if len(keys) else np.zeros(0, np.int64)
    for pid in np.unique(owner).tolist():
        sel = np.flatnonzero(owner == pid)
        try:
            part = routing.partition(pid)
        except KeyError:
            raise KeyAbsent(int(keys[sel[0]])) from None
        pos = part.positions(keys[sel])
        missing = np.flatnonzero(pos < 0)
        if missing.size:
            raise KeyAbsent(int(keys[sel[missing[0]]]))
        refs[sel] = np.uint64(part.records_ref) + pos.astype(np.uint64) * np.uint64(schema.record_width)
    ref = heap.malloc(max(8, refs.nbytes))
    pool.u8[ref : ref + refs.nbytes] = refs.view(np.uint8)
    return AddressTable(pool, ref, len(keys), schema)


def gather(table: AddressTable, attribute: int | str, dtype=np.uint8) -> np.ndarray:
    """Current bytes of one attribute for every entry, in request order.

    Returns shape (len(table), width // itemsize) in ``dtype``.
    """
    schema = table.schema
    i = schema.index(attribute)
    dtype = np.dtype(dtype)
    width = schema.widths[i]
    if width % dtype.itemsize:
        raise WidthMismatch(f"attribute width {width} is not a multiple of {dtype}")
    items = width // dtype.itemsize
    if table.length == 0:
        return np.zeros((0, items), dtype)
    start = table.refs + np.uint64(schema.offset(i))
    if not (start % np.uint64(dtype.itemsize)).any():
        flat = np.frombuffer(table.pool.data, dtype)
        idx = (start // np.uint64(dtype.itemsize)).astype(np.int64)
        return flat[idx[:, None] + np.arange(items)]
    u8 = table.pool.u8
    idx = start.astype(np.int64)[:, None] + np.arange(width)
    return np.ascontiguousarray(u8[idx]).view(dtype)
