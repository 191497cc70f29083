"""Retail memory broker: shared heaps over the zones of a global pool.

A heap is identified by a generation number. It claims whole zones by
writing its generation into the zone owner word, carves zones into
page-multiple extents recorded in the zone's extent map, and formats
single-page extents as slabs of power-of-two blocks tracked by a bitmap.

Zone metadata (little endian, at the start of each zone)::

    owner_generation u64 | home_node u64 | slot[zone_size / page_size] u64

A slot word packs ``start_page`` in the low 32 bits and ``length_pages`` in
the high 32 bits; bit 63 marks a slab. A slot is live iff its length is
non-zero. Slab page layout: ``block_size u32 | bitmap`` with the block
payload starting at the first block-aligned offset after the header.

Every metadata change is a single word store ordered after the writes it
publishes, so a process killed between any two stores leaves the pool
structurally valid; ``destroy_heap`` then reclaims whatever leaked.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import DoubleFree, NotOwner, OutOfRange, PoolExhausted, SizeTooLarge
from .pool import NULL, ZONE_NODE, ZONE_OWNER, ZONE_SLOTS, GlobalRef, PoolHandle

SLAB_FLAG = 1 << 31
_LOW32 = 0xFFFFFFFF
MIN_BLOCK = 8


def pack_slot(start: int, length: int, slab: bool = False) -> int:
    return start | ((length | (SLAB_FLAG if slab else 0)) << 32)


def unpack_slot(word: int) -> tuple[int, int, bool]:
    hi = word >> 32
    return word & _LOW32, hi & ~SLAB_FLAG & _LOW32, bool(hi & SLAB_FLAG)


@lru_cache(maxsize=None)
def slab_geometry(block_size: int, page_size: int) -> tuple[int, int]:
    """(block count, payload offset) of a one-page slab."""
    n = page_size // block_size
    while n > 0:
        header = 4 + (n + 7) // 8
        payload = -(-header // block_size) * block_size
        if payload + n * block_size <= page_size:
            return n, payload
        n -= 1
    raise ValueError(f"block size {block_size} does not fit a {page_size}-byte slab")


def size_class(size: int, page_size: int) -> int | None:
    """Slab block size serving ``size``, or None when an extent is needed."""
    if size > page_size // 2:
        return None
    return max(MIN_BLOCK, 1 << (size - 1).bit_length())


@dataclass
class _Zone:
    free: list  # [start_page, length] sorted by start
    free_slots: list
    extents: dict = field(default_factory=dict)  # start_page -> (slot, length, slab)


@dataclass
class _Slab:
    ref: int
    zone: int
    start_page: int
    block_size: int
    nblocks: int
    payload: int
    free: int


class Heap:
    """One shared heap instance. Mutated by a single owner at a time."""

    def __init__(self, pool: PoolHandle, generation: int):
        self.pool = pool
        self.generation = generation
        cfg = pool.config
        self._page = cfg.page_size
        self._zone_pages = cfg.zone_size // cfg.page_size
        self._meta = cfg.meta_pages
        self._zones: dict[int, _Zone] = {}
        self._slabs: dict[int, _Slab] = {}  # page ref -> slab
        self._open: dict[int, dict[int, _Slab]] = {}  # block size -> slabs with room
        self.live_bytes = 0
        # fault injection: called with a step name before/after each metadata store
        self.fault_hook: Callable[[str], None] | None = None

    @property
    def max_extent_pages(self) -> int:
        return self._zone_pages - self._meta

    @property
    def owned_zones(self) -> list[int]:
        return list(self._zones)

    def __repr__(self):
        return f"Heap(generation={self.generation}, zones={sorted(self._zones)})"

    def _step(self, name: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(name)

    # -- allocation -----------------------------------------------------
    def malloc(self, size: int, hint: int | None = None) -> GlobalRef:
        if size <= 0:
            raise ValueError("malloc size must be positive")
        if hint is not None and not 0 <= hint < self.pool.config.node_count:
            raise ValueError(f"hint {hint} is not a node of this pool")
        bs = size_class(size, self._page)
        if bs is not None:
            return self._malloc_block(bs, hint)
        pages = -(-size // self._page)
        if pages > self.max_extent_pages:
            raise SizeTooLarge(f"{size} bytes exceed the largest extent ({self.max_extent_pages} pages)")
        for node in self._node_order(hint):
            ref = self._extent_on_node(node, pages, None)
            if ref is not None:
                self.live_bytes += pages * self._page
                return GlobalRef(ref)
        raise PoolExhausted(f"no zone can hold {pages} pages")

    def _malloc_block(self, bs: int, hint: int | None) -> GlobalRef:
        for node in self._node_order(hint):
            slab = self._slab_with_room(bs, node)
            if slab is None:
                ref = self._extent_on_node(node, 1, bs)
                if ref is None:
                    continue
                slab = self._slabs[ref]
            return self._take_block(slab)
        raise PoolExhausted(f"no room for a {bs}-byte block")

    def _node_order(self, hint: int | None) -> list:
        if hint is None:
            return [None]
        n = self.pool.config.node_count
        return sorted(range(n), key=lambda node: (abs(node - hint), node))

    def _on_node(self, zone: int, node: int | None) -> bool:
        return node is None or self.pool.home_node(zone) == node

    def _slab_with_room(self, bs: int, node: int | None) -> _Slab | None:
        for slab in self._open.get(bs, {}).values():
            if self._on_node(slab.zone, node):
                return slab
        return None

    def _still_owned(self, zone: int) -> bool:
        if self.pool.read_u64(self.pool.zone_base(zone) + ZONE_OWNER) == self.generation:
            return True
        self._forget_zone(zone)
        return False

    def _forget_zone(self, zone: int) -> None:
        zs = self._zones.pop(zone, None)
        if zs is None:
            return
        for start, (_, _, slab) in zs.extents.items():
            if slab:
                s = self._slabs.pop(self.pool.zone_base(zone) + start * self._page)
                self._open.get(s.block_size, {}).pop(s.ref, None)

    def _extent_on_node(self, node: int | None, pages: int, slab_bs: int | None) -> int | None:
        for z in list(self._zones):
            if not self._on_node(z, node) or not self._still_owned(z):
                continue
            start = self._first_fit(self._zones[z], pages)
            if start is not None:
                return self._commit_extent(z, start, pages, slab_bs)
        z = self._acquire_zone(node)
        if z is None:
            return None
        return self._commit_extent(z, self._meta, pages, slab_bs)

    @staticmethod
    def _first_fit(zs: _Zone, pages: int) -> int | None:
        for start, length in zs.free:
            if length >= pages:
                return start
        return None

    def _acquire_zone(self, node: int | None) -> int | None:
        pool = self.pool
        cfg = pool.config
        with pool.lock():
            owners = pool.u64[:: cfg.zone_size // 8]
            for z in np.flatnonzero(owners == 0).tolist():
                if not self._on_node(z, node):
                    continue
                self._step("zone-acquire")
                pool.write_u64(pool.zone_base(z) + ZONE_OWNER, self.generation)
                self._step("zone-acquired")
                self._zones[z] = _Zone(
                    free=[[self._meta, self._zone_pages - self._meta]],
                    free_slots=list(range(cfg.slot_capacity - 1, -1, -1)),
                )
                return z
        return None

    def _commit_extent(self, z: int, start: int, pages: int, slab_bs: int | None) -> int:
        pool = self.pool
        zs = self._zones[z]
        slot = zs.free_slots[-1]
        ref = pool.zone_base(z) + start * self._page
        if slab_bs is not None:
            nblocks, payload = slab_geometry(slab_bs, self._page)
            self._step("slab-format")
            pool.u8[ref : ref + payload] = 0
            pool.u8[ref : ref + 4] = np.frombuffer(slab_bs.to_bytes(4, "little"), np.uint8)
        self._step("extent-commit")
        # commit point: everything written above precedes this single word
        pool.write_u64(pool.zone_base(z) + ZONE_SLOTS + 8 * slot, pack_slot(start, pages, slab_bs is not None))
        self._step("extent-committed")
        zs.free_slots.pop()
        i = bisect.bisect_left(zs.free, start, key=lambda e: e[0])
        fs, fl = zs.free[i]
        if fl == pages:
            del zs.free[i]
        else:
            zs.free[i] = [fs + pages, fl - pages]
        zs.extents[start] = (slot, pages, slab_bs is not None)
        if slab_bs is not None:
            slab = _Slab(ref, z, start, slab_bs, nblocks, payload, nblocks)
            self._slabs[ref] = slab
            self._open.setdefault(slab_bs, {})[ref] = slab
        return ref

    def _take_block(self, slab: _Slab) -> GlobalRef:
        u8 = self.pool.u8
        nbytes = (slab.nblocks + 7) // 8
        bitmap = u8[slab.ref + 4 : slab.ref + 4 + nbytes]
        bits = np.unpackbits(bitmap, bitorder="little")[: slab.nblocks]
        idx = int(np.argmin(bits))
        if bits[idx]:
            raise AssertionError("slab bookkeeping out of sync with its bitmap")
        self._step("block-mark")
        u8[slab.ref + 4 + idx // 8] |= 1 << (idx % 8)
        self._step("block-marked")
        slab.free -= 1
        if slab.free == 0:
            del self._open[slab.block_size][slab.ref]
        self.live_bytes += slab.block_size
        return GlobalRef(slab.ref + slab.payload + idx * slab.block_size)

    # -- free -----------------------------------------------------------
    def free(self, ref: int) -> None:
        pool = self.pool
        cfg = pool.config
        if ref <= 0 or ref >= pool.region_size:
            raise OutOfRange(f"ref {ref:#x} outside pool data region")
        z = pool.zone_of(ref)
        owner = pool.read_u64(pool.zone_base(z) + ZONE_OWNER)
        if owner != self.generation:
            raise NotOwner(f"zone {z} is owned by generation {owner}, not {self.generation}")
        zs = self._zones.get(z) or self._rebuild_zone(z)
        rel = ref - pool.zone_base(z)
        page, off = divmod(rel, cfg.page_size)
        ext = zs.extents.get(page)
        if ext is None:
            raise DoubleFree(f"no live extent at {ref:#x}")
        _, length, is_slab = ext
        if not is_slab:
            if off:
                raise DoubleFree(f"{ref:#x} is inside an extent, not its start")
            self._retire(z, page)
            self.live_bytes -= length * self._page
            return
        slab = self._slabs[ref - off]
        idx, rem = divmod(off - slab.payload, slab.block_size)
        if off < slab.payload or rem or idx >= slab.nblocks:
            raise DoubleFree(f"{ref:#x} is not a block of its slab")
        byte = slab.ref + 4 + idx // 8
        bit = 1 << (idx % 8)
        if not pool.u8[byte] & bit:
            raise DoubleFree(f"block {ref:#x} already free")
        self._step("block-clear")
        pool.u8[byte] &= ~bit & 0xFF
        self._step("block-cleared")
        slab.free += 1
        self.live_bytes -= slab.block_size
        if slab.free == slab.nblocks:
            self._retire(z, page)
        else:
            self._open.setdefault(slab.block_size, {})[slab.ref] = slab

    def _retire(self, z: int, start: int) -> None:
        pool = self.pool
        zs = self._zones[z]
        slot, length, is_slab = zs.extents[start]
        self._step("extent-retire")
        pool.write_u64(pool.zone_base(z) + ZONE_SLOTS + 8 * slot, 0)
        self._step("extent-retired")
        del zs.extents[start]
        zs.free_slots.append(slot)
        _insert_free(zs.free, start, length)
        if is_slab:
            slab = self._slabs.pop(pool.zone_base(z) + start * self._page)
            self._open.get(slab.block_size, {}).pop(slab.ref, None)

    # -- private index reconstruction -----------------------------------
    def _rebuild_zone(self, z: int) -> _Zone:
        pool = self.pool
        cfg = pool.config
        base = pool.zone_base(z)
        slots = _slot_view(pool, z)
        zs = _Zone(free=[], free_slots=[])
        used = []
        for slot in range(cfg.slot_capacity - 1, -1, -1):
            word = int(slots[slot])
            if word == 0:
                zs.free_slots.append(slot)
                continue
            start, length, is_slab = unpack_slot(word)
            zs.extents[start] = (slot, length, is_slab)
            used.append((start, length))
            if is_slab:
                ref = base + start * self._page
                bs = int.from_bytes(bytes(pool.u8[ref : ref + 4]), "little")
                nblocks, payload = slab_geometry(bs, self._page)
                bits = np.unpackbits(pool.u8[ref + 4 : ref + 4 + (nblocks + 7) // 8], bitorder="little")
                taken = int(bits[:nblocks].sum())
                slab = _Slab(ref, z, start, bs, nblocks, payload, nblocks - taken)
                self._slabs[ref] = slab
                if slab.free:
                    self._open.setdefault(bs, {})[ref] = slab
                self.live_bytes += taken * bs
            else:
                self.live_bytes += length * self._page
        cursor = self._meta
        for start, length in sorted(used):
            if start > cursor:
                zs.free.append([cursor, start - cursor])
            cursor = max(cursor, start + length)
        if cursor < self._zone_pages:
            zs.free.append([cursor, self._zone_pages - cursor])
        self._zones[z] = zs
        return zs


def _insert_free(free: list, start: int, length: int) -> None:
    i = bisect.bisect_left(free, start, key=lambda e: e[0])
    if i > 0 and free[i - 1][0] + free[i - 1][1] == start:
        i -= 1
        free[i][1] += length
    else:
        free.insert(i, [start, length])
    if i + 1 < len(free) and free[i][0] + free[i][1] == free[i + 1][0]:
        free[i][1] += free[i + 1][1]
        del free[i + 1]


def _slot_view(pool: PoolHandle, z: int) -> np.ndarray:
    first = (pool.zone_base(z) + ZONE_SLOTS) // 8
    return pool.u64[first : first + pool.config.slot_capacity]


def _owner_view(pool: PoolHandle) -> np.ndarray:
    return pool.u64[:: pool.config.zone_size // 8]


def create_heap(pool: PoolHandle) -> Heap:
    return Heap(pool, pool.fetch_increment_generation())


def open_heap(pool: PoolHandle, generation: int) -> Heap:
    """Adopt an existing generation, rebuilding its private index from the pool."""
    heap = Heap(pool, generation)
    for z in np.flatnonzero(_owner_view(pool) == generation).tolist():
        heap._rebuild_zone(z)
    return heap


def destroy_heap(pool: PoolHandle, generation: int) -> int:
    """Bulk-free every zone owned by ``generation``; returns how many were reclaimed."""
    if generation == 0:
        return 0
    zones = np.flatnonzero(_owner_view(pool) == generation).tolist()
    for z in zones:
        # extent map first, owner word last: a crash midway leaves the zone
        # still owned and the call can simply be repeated
        _slot_view(pool, z)[:] = 0
        pool.write_u64(pool.zone_base(z) + ZONE_OWNER, 0)
    return len(zones)


def owned_zones(pool: PoolHandle, generation: int) -> list[int]:
    return np.flatnonzero(_owner_view(pool) == generation).tolist()


@dataclass
class ZoneReport:
    zone: int
    owner: int
    home_node: int
    extents: int
    live_bytes: int


@dataclass
class PoolReport:
    zones: list[ZoneReport]
    defects: list[str]
    live_bytes: dict[int, int]

    @property
    def clean(self) -> bool:
        return not self.defects

    @property
    def total_live_bytes(self) -> int:
        return sum(self.live_bytes.values())


def verify_pool(pool: PoolHandle) -> PoolReport:
    """Structural check of all zone metadata. Requires quiescence."""
    cfg = pool.config
    page = cfg.page_size
    zone_pages = cfg.zone_size // page
    meta = cfg.meta_pages
    next_gen = pool.next_generation
    zones, defects, live = [], [], {}
    for z in range(cfg.zone_count):
        base = pool.zone_base(z)
        owner = pool.read_u64(base + ZONE_OWNER)
        node = pool.read_u64(base + ZONE_NODE)
        if node != pool.home_node(z):
            defects.append(f"zone {z}: home node {node}, expected {pool.home_node(z)}")
        if owner >= next_gen:
            defects.append(f"zone {z}: owner generation {owner} was never issued")
        slots = _slot_view(pool, z)
        idx = np.flatnonzero(slots)
        if owner == 0:
            if idx.size:
                defects.append(f"zone {z}: unowned but has {idx.size} live extent slots")
            zones.append(ZoneReport(z, 0, node, 0, 0))
            continue
        words = slots[idx]
        start = (words & _LOW32).astype(np.int64)
        hi = words >> np.uint64(32)
        is_slab = (hi & np.uint64(SLAB_FLAG)) != 0
        length = (hi & np.uint64(SLAB_FLAG - 1)).astype(np.int64)
        bad = (length == 0) | (start < meta) | (start + length > zone_pages) | (is_slab & (length != 1))
        for i in np.flatnonzero(bad).tolist():
            defects.append(f"zone {z} slot {idx[i]}: bad extent ({start[i]}, {length[i]})")
        order = np.argsort(start, kind="stable")
        s, ln = start[order], length[order]
        for i in np.flatnonzero(s[1:] < s[:-1] + ln[:-1]).tolist():
            defects.append(f"zone {z}: extents at pages {s[i]} and {s[i + 1]} overlap")
        zone_live = int(length[~is_slab].sum()) * page
        for sp in start[is_slab].tolist():
            ref = base + sp * page
            if sp >= zone_pages:
                continue
            bs = int.from_bytes(bytes(pool.u8[ref : ref + 4]), "little")
            if bs < MIN_BLOCK or bs > page // 2 or bs & (bs - 1):
                defects.append(f"zone {z}: slab at page {sp} has block size {bs}")
                continue
            nblocks, payload = slab_geometry(bs, page)
            bits = np.unpackbits(pool.u8[ref + 4 : ref + 4 + (nblocks + 7) // 8], bitorder="little")
            if bits[nblocks:].any():
                defects.append(f"zone {z}: slab at page {sp} marks blocks past its end")
            zone_live += int(bits[:nblocks].sum()) * bs
        live[owner] = live.get(owner, 0) + zone_live
        zones.append(ZoneReport(z, owner, node, int(idx.size), zone_live))
    return PoolReport(zones, defects, live)


def pool_live_bytes(pool: PoolHandle) -> int:
    return verify_pool(pool).total_live_bytes


__all__ = [
    "Heap", "create_heap", "open_heap", "destroy_heap", "verify_pool", "owned_zones",
    "PoolReport", "ZoneReport", "slab_geometry", "size_class", "NULL",
]
