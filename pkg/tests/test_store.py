import multiprocessing
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharkle.broker import create_heap, destroy_heap, verify_pool
from sharkle.errors import DuplicateKey, DuplicatePartitionId, KeyAbsent, UnsortedInput, WidthMismatch
from sharkle.pool import PoolConfig, attach, create_pool
from sharkle.shuffle import HashPartitioner, IdentityPartitioner, RecordBatch, Scheme, create_session, map_write, reduce_columns, release_session
from sharkle.store import (
    AttributePartition,
    AttributeSchema,
    build_address_table,
    build_partition,
    build_routing_table,
    gather,
    lookup,
    open_partition,
    scan,
    update_in_place,
)

SCHEMA = AttributeSchema.of(a=4, b=8)


def payload(k):
    return int(k % 2**31).to_bytes(4, "little") + (int(k) * 3 % 2**64).to_bytes(8, "little")


def make_partition(pool, keys, pid=0, schema=SCHEMA, heap=None):
    heap = heap or create_heap(pool)
    ref = build_partition(heap, pid, schema, [(int(k), payload(k)) for k in keys])
    return open_partition(pool, ref, schema)


def test_schema_widths():
    assert SCHEMA.raw_width == 20
    assert SCHEMA.offset(1) == 12
    with pytest.raises(ValueError):
        AttributeSchema.of(a=0)


def test_small_partition(pool):
    part = make_partition(pool, [5, 9, 12])
    assert part.entry_count == 3
    assert part.position(9) == 1
    assert lookup(part, 9) == payload(9)
    assert lookup(part, 10) is None
    assert part.keys.tolist() == [5, 9, 12]
    assert part.versions.tolist() == [0, 0, 0]


def test_build_rejects_bad_input(pool):
    heap = create_heap(pool)
    with pytest.raises(UnsortedInput):
        build_partition(heap, 0, SCHEMA, [(9, payload(9)), (5, payload(5))])
    with pytest.raises(DuplicateKey):
        build_partition(heap, 0, SCHEMA, [(5, payload(5)), (5, payload(5))])
    with pytest.raises(WidthMismatch):
        build_partition(heap, 0, SCHEMA, [(5, b"short")])


def test_empty_partition(pool):
    part = make_partition(pool, [])
    assert len(part) == 0
    assert lookup(part, 1) is None
    assert list(scan(part, -10, 10)) == []


def test_records_are_contiguous(pool):
    part = make_partition(pool, range(0, 300, 3))
    raw = part.record_array()
    assert raw.shape == (100, SCHEMA.record_width)
    assert raw.flags.c_contiguous
    assert raw[:, :8].copy().view("<i8").ravel().tolist() == list(range(0, 300, 3))


def test_dual_index_agreement(pool):
    rng = np.random.default_rng(0)
    keys = np.unique(rng.integers(-(10**12), 10**12, 10_000))
    heap = create_heap(pool)
    ref = build_partition(heap, 1, SCHEMA, (keys, np.zeros((len(keys), 12), np.uint8)))
    part = open_partition(pool, ref)
    probes = np.concatenate([keys, rng.integers(-(10**12), 10**12, 5000)])
    hashed = part.positions(probes)
    assert hashed.tolist() == [part.bisect(int(k)) for k in probes]
    assert (hashed[: len(keys)] == np.arange(len(keys))).all()


@settings(max_examples=50, deadline=None)
@given(keys=st.lists(st.integers(-(2**63), 2**63 - 1), unique=True, max_size=100), probes=st.lists(st.integers(-(2**63), 2**63 - 1), max_size=20))
def test_dual_index_property(store_pool, keys, probes):
    keys = sorted(keys)
    part = make_partition(store_pool, keys)
    for k in keys + probes:
        assert part.position(k) == part.bisect(k)


@pytest.fixture(scope="module")
def store_pool(tmp_path_factory):
    p = create_pool(PoolConfig(tmp_path_factory.mktemp("store") / "p", zone_count=128, zone_size=256 << 10))
    yield p
    p.close()


def test_scan_matches_filter(pool):
    rng = np.random.default_rng(1)
    keys = np.unique(rng.integers(0, 10**6, 3000))
    part = make_partition(pool, keys)
    everything = list(scan(part, -(2**63), 2**63 - 1))
    assert [k for k, _ in everything] == keys.tolist()
    assert list(scan(part, int(keys[0]) + 1, int(keys[1]) - 1)) == [] or keys[1] - keys[0] > 1
    for _ in range(200):
        lo, hi = sorted(rng.integers(-10, 10**6 + 10, 2).tolist())
        got = list(scan(part, lo, hi))
        assert got == [(k, payload(k)) for k in keys.tolist() if lo <= k <= hi]
    with pytest.raises(ValueError):
        list(scan(part, 5, 4))


def test_update_in_place(pool):
    part = make_partition(pool, [1, 2, 3])
    before = part.record_array().copy()
    update_in_place(part, 2, "b", (77).to_bytes(8, "little"))
    after = part.record_array()
    assert lookup(part, 2) == payload(2)[:4] + (77).to_bytes(8, "little")
    changed = np.argwhere(before != after)
    # 8 payload bytes plus the version word of record 1, nothing else
    assert set(changed[:, 0].tolist()) == {1}
    assert part.versions.tolist() == [0, 1, 0]
    payload_cols = {int(c) for c in changed[:, 1] if c < SCHEMA.raw_width}
    assert payload_cols <= set(range(12, 20))
    with pytest.raises(KeyAbsent):
        update_in_place(part, 4, 0, b"abcd")
    with pytest.raises(WidthMismatch):
        update_in_place(part, 1, 0, b"abc")


def test_random_updates_match_shadow(pool):
    rng = np.random.default_rng(2)
    keys = np.arange(0, 30_000, 3)
    part = make_partition(pool, keys)
    shadow = {int(k): payload(k) for k in keys}
    for _ in range(10_000):
        k = int(rng.choice(keys))
        attr = int(rng.integers(2))
        new = rng.integers(0, 256, SCHEMA.widths[attr], dtype=np.uint8).tobytes()
        update_in_place(part, k, attr, new)
        old = shadow[k]
        shadow[k] = new + old[4:] if attr == 0 else old[:4] + new
    assert dict(scan(part, 0, 10**9)) == shadow


def test_update_column(pool):
    part = make_partition(pool, range(10))
    part.update_column("b", np.arange(10) * 10, "<i8")
    assert part.column("b", "<i8")[:, 0].tolist() == list(range(0, 100, 10))
    assert part.versions.tolist() == [1] * 10


def test_routing_table(pool):
    heap = create_heap(pool)
    refs = [build_partition(heap, pid, SCHEMA, [(pid * 100 + i, payload(pid * 100 + i)) for i in range(5)]) for pid in range(4)]
    table = build_routing_table(heap, refs, SCHEMA)
    assert len(table) == 4 and table.partition_ids() == [0, 1, 2, 3]
    for pid in range(4):
        assert table.partition(pid).partition_id == pid
        assert int(table.refs[pid]) == refs[pid]
    with pytest.raises(DuplicatePartitionId):
        build_routing_table(heap, refs + [refs[0]])


def _read_through_table(table):
    return [(p.partition_id, p.keys.tolist(), lookup(p, int(p.keys[0]))) for p in table.partitions()]


def test_routing_table_cross_process(pool):
    heap = create_heap(pool)
    refs = [build_partition(heap, pid, SCHEMA, [(pid * 10 + i, payload(pid * 10 + i)) for i in range(3)]) for pid in range(3)]
    table = build_routing_table(heap, refs, SCHEMA)
    with multiprocessing.get_context("fork").Pool(1) as workers:
        seen = workers.apply(_read_through_table, (table,))
    assert seen == _read_through_table(table)


def test_pickled_partition_reattaches(pool):
    part = make_partition(pool, [4, 8])
    clone = pickle.loads(pickle.dumps(part))
    assert clone.ref == part.ref and clone.pool.path == part.pool.path
    assert lookup(clone, 8) == payload(8)


def _dataset(pool, n, P):
    heap = create_heap(pool)
    keys = np.arange(n, dtype=np.int64)
    owner = HashPartitioner(P).assign_keys(keys)
    refs = [build_partition(heap, p, SCHEMA, (keys[owner == p], np.stack([np.frombuffer(payload(k), np.uint8) for k in keys[owner == p]]))) for p in range(P)]
    return heap, build_routing_table(heap, refs, SCHEMA)


def test_address_table_example(pool):
    heap, routing = _dataset(pool, 20, 3)
    at = build_address_table(heap, routing, [7, 3, 7])
    assert len(at) == 3
    assert at.refs[0] == at.refs[2] != at.refs[1]
    assert at.keys().tolist() == [7, 3, 7]
    with pytest.raises(KeyAbsent):
        build_address_table(heap, routing, [3, 99])
    empty = build_address_table(heap, routing, [])
    assert gather(empty, "b").shape == (0, 8)


def test_gather_equals_lookups(pool):
    heap, routing = _dataset(pool, 20_000, 4)
    rng = np.random.default_rng(3)
    requests = rng.integers(0, 20_000, 100_000)
    at = build_address_table(heap, routing, requests)
    hp = HashPartitioner(4)
    for k in rng.choice(requests, 50).tolist():
        update_in_place(routing.partition(hp.partition(k)), k, "b", (-k).to_bytes(8, "little", signed=True))
    got = gather(at, "b", "<i8")[:, 0]
    expect = [int.from_bytes(lookup(routing.partition(hp.partition(k)), k)[4:], "little", signed=True) for k in requests.tolist()]
    assert got.tolist() == expect
    assert gather(at, 0).shape == (100_000, 4)


def test_gather_matches_pass_through_shuffle(pool):
    heap, routing = _dataset(pool, 2000, 4)
    rng = np.random.default_rng(4)
    consumers = 3
    requests = [rng.integers(0, 2000, 500) for _ in range(consumers)]
    direct = [gather(build_address_table(heap, routing, r), "b") for r in requests]
    # the same attribute bytes shipped through a shuffle keyed by consumer partition
    session = create_session(pool, create_heap(pool), Scheme.PASS_THROUGH, 4, consumers, IdentityPartitioner(consumers))
    hp = HashPartitioner(4)
    for p in range(4):
        part = routing.partition(p)
        tags, rows = [], []
        for c, req in enumerate(requests):
            idx = np.flatnonzero(hp.assign_keys(req) == p)
            pos = part.positions(req[idx])
            tags.append(idx * consumers + c)
            rows.append(part.column("b")[pos])
        map_write(session, p, RecordBatch.from_arrays(np.concatenate(tags), np.concatenate(rows)))
    for c in range(consumers):
        out = reduce_columns(session, c)
        order = np.argsort(out.keys // consumers)
        assert np.array_equal(out.values[order], direct[c])
    release_session(session)


def test_store_survives_session_heaps(pool):
    part = make_partition(pool, range(100))
    session = create_session(pool, create_heap(pool), Scheme.HASH_MERGE, 1, 1)
    map_write(session, 0, RecordBatch.from_arrays(np.arange(1000), value_width=8))
    release_session(session)
    scratch = create_heap(pool)
    scratch.malloc(100_000)
    destroy_heap(pool, scratch.generation)
    assert [k for k, _ in scan(part, 0, 99)] == list(range(100))
    assert lookup(part, 42) == payload(42)
    assert verify_pool(pool).clean


def test_memory_overhead(make_pool):
    pool = make_pool(zone_count=2, zone_size=16 << 20)
    heap = create_heap(pool)
    schema = AttributeSchema.of(belief=24, unary=24)
    n = 100_000
    build_partition(heap, 0, schema, (np.arange(n), np.zeros((n, 48), np.uint8)))
    raw = n * schema.raw_width
    assert verify_pool(pool).live_bytes[heap.generation] <= 1.5 * raw


def test_schema_mismatch_on_open(pool):
    part = make_partition(pool, [1])
    with pytest.raises(WidthMismatch):
        AttributePartition(pool, part.ref, AttributeSchema.of(a=12))
    inferred = AttributePartition(pool, part.ref)
    assert inferred.schema.widths == [4, 8]


def _worker_update(args):
    path, ref, keys = args
    part = AttributePartition(attach(path), ref, SCHEMA)
    for k in keys:
        update_in_place(part, k, "b", (k + 1000).to_bytes(8, "little"))
    return len(keys)


def test_cross_process_writers_then_readers(pool):
    part = make_partition(pool, range(400))
    chunks = [list(range(i, 400, 4)) for i in range(4)]
    with multiprocessing.get_context("fork").Pool(2) as workers:
        assert sum(workers.map(_worker_update, [(str(pool.path), part.ref, c) for c in chunks])) == 400
    # barrier passed: every record shows its final value and one version bump
    for k, p in scan(part, 0, 399):
        assert int.from_bytes(p[4:], "little") == k + 1000
    assert (part.versions == 1).all()
