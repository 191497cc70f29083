"""Compiled inner loops. Each has a plain-Python twin used as a test oracle."""

from __future__ import annotations

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
EMPTY = -1


@numba.njit(cache=True, nogil=True)
def _fnv1a(data):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for i in range(data.shape[0]):
        h ^= np.uint64(data[i])
        h *= prime
    return h


def fnv1a64(data) -> int:
    """64-bit FNV-1a over any buffer. Releases the GIL while hashing."""
    arr = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    arr = np.ascontiguousarray(arr).reshape(-1).view(np.uint8)
    return int(_fnv1a(arr))


def fnv1a64_py(data: bytes) -> int:
    h = FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@numba.njit(cache=True, nogil=True)
def fnv1a_rows(rows):
    n = rows.shape[0]
    out = np.empty(n, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for r in range(n):
        h = np.uint64(FNV_OFFSET)
        for j in range(rows.shape[1]):
            h ^= np.uint64(rows[r, j])
            h *= prime
        out[r] = h
    return out


@numba.njit(cache=True, nogil=True)
def _slot(key, shift):
    return (np.uint64(key) * np.uint64(GOLDEN)) >> np.uint64(shift)


@numba.njit(cache=True, nogil=True)
def build_index(keys, bits):
    """Open-addressing table of record positions, linear probing."""
    size = 1 << bits
    mask = size - 1
    shift = 64 - bits
    table = np.full(size, EMPTY, dtype=np.int32)
    for i in range(keys.shape[0]):
        h = np.int64(_slot(keys[i], shift))
        while table[h] != EMPTY:
            h = (h + 1) & mask
        table[h] = i
    return table


@numba.njit(cache=True, nogil=True)
def probe_many(table, keys, queries, bits):
    mask = (1 << bits) - 1
    shift = 64 - bits
    out = np.empty(queries.shape[0], dtype=np.int64)
    for q in range(queries.shape[0]):
        key = queries[q]
        h = np.int64(_slot(key, shift))
        pos = EMPTY
        while True:
            r = table[h]
            if r == EMPTY:
                break
            if keys[r] == key:
                pos = r
                break
            h = (h + 1) & mask
        out[q] = pos
    return out


def index_slot_py(key: int, bits: int) -> int:
    return (((key & MASK64) * GOLDEN) & MASK64) >> (64 - bits)


def warmup() -> None:
    """Compile every kernel once (numba caches the result on disk)."""
    keys = np.arange(4, dtype=np.int64)
    table = build_index(keys, 3)
    probe_many(table, keys, keys, 3)
    fnv1a64(b"x")
    fnv1a_rows(np.zeros((1, 2), np.uint8))
