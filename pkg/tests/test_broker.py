import multiprocessing
import os
import random
import signal

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from helpers import StepCounter, charged_bytes, churn, count_steps, crash_trial
from sharkle.broker import (
    SLAB_FLAG,
    create_heap,
    destroy_heap,
    open_heap,
    owned_zones,
    pack_slot,
    size_class,
    slab_geometry,
    unpack_slot,
    verify_pool,
)
from sharkle.errors import DoubleFree, NotOwner, OutOfRange, PoolExhausted, SizeTooLarge
from sharkle.pool import PoolConfig, attach, create_pool


def test_generations_distinct(pool):
    gens = [create_heap(pool).generation for _ in range(1000)]
    assert len(set(gens)) == 1000
    assert gens == sorted(gens)
    assert gens[0] >= 1


def test_size_classes():
    assert size_class(1, 4096) == 8
    assert size_class(100, 4096) == 128
    assert size_class(2048, 4096) == 2048
    assert size_class(2049, 4096) is None
    for bs in (8, 16, 64, 512, 2048):
        n, payload = slab_geometry(bs, 4096)
        assert payload % bs == 0
        assert payload >= 4 + (n + 7) // 8
        assert payload + n * bs <= 4096
        # one more block would not fit
        assert -(-(4 + (n + 8) // 8) // bs) * bs + (n + 1) * bs > 4096


@pytest.mark.parametrize("start,length,slab", [(0, 1, False), (17, 3, True), (2**32 - 1, 2**31 - 1, True)])
def test_slot_word_round_trip(start, length, slab):
    w = pack_slot(start, length, slab)
    assert unpack_slot(w) == (start, length, slab)
    assert bool(w >> 32 & SLAB_FLAG) == slab


def test_extent_pages(pool):
    heap = create_heap(pool)
    ref = heap.malloc(10240)
    assert heap.live_bytes == 3 * 4096
    assert ref % 4096 == 0
    [z] = heap.owned_zones
    assert pool.read_u64(pool.zone_base(z)) == heap.generation
    with pytest.raises(SizeTooLarge):
        heap.malloc(pool.config.zone_size)
    big = heap.malloc(heap.max_extent_pages * 4096)
    assert big % pool.config.zone_size == heap.pool.config.meta_pages * 4096


def test_small_allocation_in_slab(pool):
    heap = create_heap(pool)
    a = heap.malloc(100)
    page = a - a % 4096
    assert int.from_bytes(bytes(pool.data[page : page + 4]), "little") == 128
    assert heap.live_bytes == 128
    assert verify_pool(pool).live_bytes == {heap.generation: 128}


def test_free_then_malloc_reuses_slab(pool):
    heap = create_heap(pool)
    keep = heap.malloc(64)
    a = heap.malloc(64)
    heap.free(a)
    b = heap.malloc(64)
    assert b // 4096 == a // 4096 == keep // 4096


def test_not_owner_and_double_free(pool):
    h1, h2 = create_heap(pool), create_heap(pool)
    r = h1.malloc(64)
    e = h1.malloc(9000)
    with pytest.raises(NotOwner):
        h2.free(r)
    h1.free(r)
    with pytest.raises(DoubleFree):
        h1.free(r)
    with pytest.raises(DoubleFree):
        h1.free(e + 4096)
    h1.free(e)
    with pytest.raises((DoubleFree, NotOwner)):
        h1.free(e)
    with pytest.raises(OutOfRange):
        h1.free(0)


def test_bad_requests(pool):
    heap = create_heap(pool)
    with pytest.raises(ValueError):
        heap.malloc(0)
    with pytest.raises(ValueError):
        heap.malloc(8, hint=5)


def test_exhaustion(make_pool):
    p = make_pool(zone_count=2, zone_size=64 << 10)
    heap = create_heap(p)
    with pytest.raises(PoolExhausted):
        for _ in range(100):
            heap.malloc(8000)
    assert verify_pool(p).clean


def test_destroy_counts(pool):
    heap = create_heap(pool)
    for _ in range(3):
        heap.malloc(heap.max_extent_pages * 4096)
    assert destroy_heap(pool, heap.generation) == 3
    assert destroy_heap(pool, heap.generation) == 0
    assert owned_zones(pool, heap.generation) == []
    assert verify_pool(pool).total_live_bytes == 0


def test_destroy_keeps_other_heaps(pool):
    h1, h2 = create_heap(pool), create_heap(pool)
    r = h2.malloc(5000)
    pool.data[r : r + 3] = b"abc"
    h1.malloc(5000)
    destroy_heap(pool, h1.generation)
    assert bytes(pool.data[r : r + 3]) == b"abc"
    assert verify_pool(pool).live_bytes == {h2.generation: 8192}


def test_verify_fresh_pool(pool):
    rep = verify_pool(pool)
    assert rep.clean and rep.total_live_bytes == 0
    assert all(z.owner == 0 for z in rep.zones)


def test_verify_detects_damage(pool):
    heap = create_heap(pool)
    ref = heap.malloc(9000)
    z = pool.zone_of(ref)
    slot = pool.zone_base(z) + 16
    word = pool.read_u64(slot)
    pool.write_u64(slot + 8, word)  # a second extent over the same pages
    assert not verify_pool(pool).clean
    pool.write_u64(slot + 8, 0)
    pool.write_u64(pool.zone_base(z), 10**9)
    assert any("never issued" in d for d in verify_pool(pool).defects)


def test_hint_honoured(make_pool):
    p = make_pool(node_count=2)
    heap = create_heap(p)
    for hint in (0, 1, 1, 0):
        ref = heap.malloc(6000, hint)
        assert p.home_node(p.zone_of(ref)) == hint
        ref = heap.malloc(24, hint)
        assert p.home_node(p.zone_of(ref)) == hint


def test_hint_falls_back_to_other_nodes(make_pool):
    p = make_pool(node_count=2, zone_count=2, zone_size=64 << 10)
    heap = create_heap(p)
    refs = [heap.malloc(40000, 0) for _ in range(2)]
    assert sorted(p.home_node(p.zone_of(r)) for r in refs) == [0, 1]


def test_open_heap_adopts(pool):
    heap = create_heap(pool)
    refs = [heap.malloc(s) for s in (8, 100, 5000, 100)]
    again = open_heap(pool, heap.generation)
    assert sorted(again.owned_zones) == sorted(heap.owned_zones)
    for r in refs:
        again.free(r)
    with pytest.raises(DoubleFree):
        again.free(refs[0])
    assert verify_pool(pool).live_bytes.get(heap.generation, 0) == 0


def test_random_ops_match_shadow(pool):
    rng = random.Random(3)
    heaps = [create_heap(pool) for _ in range(3)]
    live = {h.generation: {} for h in heaps}
    for _ in range(10_000):
        h = rng.choice(heaps)
        mine = live[h.generation]
        if mine and rng.random() < 0.5:
            ref = rng.choice(list(mine))
            h.free(ref)
            del mine[ref]
        else:
            size = rng.choice([rng.randint(1, 2048), rng.randint(2049, 20000)])
            ref = h.malloc(size)
            assert ref not in mine
            mine[ref] = size
    rep = verify_pool(pool)
    assert rep.clean, rep.defects
    for h in heaps:
        expect = sum(charged_bytes(s, 4096) for s in live[h.generation].values())
        assert rep.live_bytes.get(h.generation, 0) == expect == h.live_bytes
    # no two live allocations overlap
    spans = sorted((r, r + s) for m in live.values() for r, s in m.items())
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


def test_crash_at_every_step(pool):
    steps, gen = count_steps(pool)
    assert steps > 100
    destroy_heap(pool, gen)
    names = set()
    for k in range(steps):
        gen, name = crash_trial(pool, k)
        names.add(name)
        assert verify_pool(pool).clean
        destroy_heap(pool, gen)
        assert owned_zones(pool, gen) == []
    assert {"zone-acquire", "extent-commit", "slab-format", "block-mark", "block-clear", "extent-retire"} <= names
    rep = verify_pool(pool)
    assert rep.clean and rep.total_live_bytes == 0


def _killed_child(path, step):
    pool = attach(path)
    heap = create_heap(pool)

    def hook(name, counter=StepCounter()):
        if counter.steps == step:
            os.kill(os.getpid(), signal.SIGKILL)
        counter(name)

    heap.fault_hook = hook
    churn(heap, 7)
    os._exit(0)


@pytest.mark.parametrize("step", [0, 5, 41, 97])
def test_sigkill_mid_operation(pool, step):
    gen = pool.next_generation
    proc = multiprocessing.get_context("fork").Process(target=_killed_child, args=(str(pool.path), step))
    proc.start()
    proc.join()
    assert proc.exitcode == -signal.SIGKILL
    assert verify_pool(pool).clean
    assert destroy_heap(pool, gen) >= (1 if step else 0)
    assert owned_zones(pool, gen) == []
    assert verify_pool(pool).total_live_bytes == 0


class HeapMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        import tempfile

        self.dir = tempfile.mkdtemp(dir="/dev/shm" if os.path.isdir("/dev/shm") else None)
        self.pool = create_pool(PoolConfig(os.path.join(self.dir, "p"), zone_count=8, zone_size=256 << 10))
        self.heap = create_heap(self.pool)
        self.live = {}

    @rule(size=st.one_of(st.integers(1, 2048), st.integers(2049, 40000)))
    def malloc(self, size):
        try:
            ref = self.heap.malloc(size)
        except PoolExhausted:
            return
        self.pool.data[ref] = len(self.live) & 0xFF
        self.live[ref] = (size, len(self.live) & 0xFF)

    @precondition(lambda self: self.live)
    @rule(data=st.data())
    def free(self, data):
        ref = data.draw(st.sampled_from(sorted(self.live)))
        size, tag = self.live.pop(ref)
        assert self.pool.data[ref] == tag
        self.heap.free(ref)

    @invariant()
    def accounting(self):
        expect = sum(charged_bytes(s, 4096) for s, _ in self.live.values())
        assert self.heap.live_bytes == expect

    def teardown(self):
        rep = verify_pool(self.pool)
        assert rep.clean
        assert rep.live_bytes.get(self.heap.generation, 0) == self.heap.live_bytes
        self.pool.close()
        import shutil

        shutil.rmtree(self.dir, ignore_errors=True)


TestHeapMachine = HeapMachine.TestCase
TestHeapMachine.settings = settings(max_examples=30, stateful_step_count=60, deadline=None)


def test_numpy_pattern_survives_neighbours(pool):
    heap = create_heap(pool)
    blocks = {}
    for i in range(200):
        size = 1 + (i * 37) % 3000
        ref = heap.malloc(size)
        pool.u8[ref : ref + size] = i & 0xFF
        blocks[ref] = (size, i & 0xFF)
    for ref, (size, v) in blocks.items():
        assert np.all(pool.u8[ref : ref + size] == v)
