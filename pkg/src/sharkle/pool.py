"""File-backed global memory pool shared by several processes.

Every process maps the same file, possibly at a different virtual address,
so shared data is always addressed by a :data:`GlobalRef`: a byte offset
from the start of the pool's data region. ``resolve`` and ``to_ref``
translate between offsets and process-local buffers.

File layout (little endian)::

    [0, 8)    magic  b"SHKLPOOL"
    [8, 16)   format_version = 1
    [16, 56)  zone_size, zone_count, page_size, node_count, next_generation
    ...       zero padding up to one page
    data region: zone_count zones of zone_size bytes
"""

from __future__ import annotations

import fcntl
import mmap
import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import NewType

import numpy as np

from .errors import BadMagic, InvalidConfig, IoFailure, NotInPool, OutOfRange, VersionMismatch

GlobalRef = NewType("GlobalRef", int)
NULL = GlobalRef(0)

MAGIC = b"SHKLPOOL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sQQQQQQ")
_NEXT_GEN_OFFSET = 48

DEFAULT_ZONE_SIZE = 64 << 20

# zone metadata: owner_generation, home_node, then the extent slot array
ZONE_OWNER = 0
ZONE_NODE = 8
ZONE_SLOTS = 16


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class PoolConfig:
    path: str | os.PathLike
    zone_count: int = 16
    zone_size: int = DEFAULT_ZONE_SIZE
    page_size: int = 4096
    node_count: int = 1

    def validate(self) -> None:
        if not _is_pow2(self.page_size):
            raise InvalidConfig(f"page_size {self.page_size} is not a power of two")
        if not _is_pow2(self.zone_size):
            raise InvalidConfig(f"zone_size {self.zone_size} is not a power of two")
        if self.zone_size % self.page_size:
            raise InvalidConfig("zone_size must be a multiple of page_size")
        if self.zone_count < 1:
            raise InvalidConfig("zone_count must be positive")
        if self.node_count < 1:
            raise InvalidConfig("node_count must be at least 1")

    @property
    def region_size(self) -> int:
        return self.zone_size * self.zone_count

    @property
    def slot_capacity(self) -> int:
        return self.zone_size // self.page_size

    @property
    def meta_pages(self) -> int:
        meta = ZONE_SLOTS + 8 * self.slot_capacity
        return -(-meta // self.page_size)


class PoolHandle:
    """A process-local mapping of a pool file."""

    def __init__(self, path: Path, config: PoolConfig, fd: int, mm: mmap.mmap):
        self.path = path
        self.config = config
        self._fd = fd
        self._mm = mm
        self._closed = False
        page = config.page_size
        self.region_size = config.region_size
        self.data = memoryview(mm)[page : page + self.region_size]
        self.u8 = np.frombuffer(self.data, dtype=np.uint8)
        self.u64 = self.u8.view("<u8")
        self.base_address = self.u8.ctypes.data
        self._header = memoryview(mm)[:page]
        self._tlock = threading.RLock()
        self._depth = 0

    # -- header ---------------------------------------------------------
    @property
    def next_generation(self) -> int:
        return struct.unpack_from("<Q", self._header, _NEXT_GEN_OFFSET)[0]

    def fetch_increment_generation(self) -> int:
        with self.lock():
            gen = self.next_generation
            struct.pack_into("<Q", self._header, _NEXT_GEN_OFFSET, gen + 1)
        return gen

    @contextmanager
    def lock(self):
        """Pool-wide mutual exclusion across threads and processes.

        Emulates the compare-and-swap on a zone owner word: a thread lock for
        callers sharing this handle, ``flock`` for everyone else.
        """
        with self._tlock:
            if self._depth == 0:
                fcntl.flock(self._fd, fcntl.LOCK_EX)
            self._depth += 1
            try:
                yield
            finally:
                self._depth -= 1
                if self._depth == 0:
                    fcntl.flock(self._fd, fcntl.LOCK_UN)

    # -- word access ----------------------------------------------------
    def read_u64(self, ref: int) -> int:
        return struct.unpack_from("<Q", self.data, ref)[0]

    def write_u64(self, ref: int, value: int) -> None:
        struct.pack_into("<Q", self.data, ref, value)

    # -- address translation -------------------------------------------
    def resolve(self, ref: int, size: int | None = None) -> memoryview:
        return resolve(self, ref, size)

    def to_ref(self, accessor) -> GlobalRef:
        return to_ref(self, accessor)

    def zone_of(self, ref: int) -> int:
        return ref // self.config.zone_size

    def zone_base(self, zone: int) -> int:
        return zone * self.config.zone_size

    def home_node(self, zone: int) -> int:
        return zone % self.config.node_count

    def flush(self) -> None:
        self._mm.flush()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.u64 = self.u8 = None
        try:
            self.data.release()
            self._header.release()
            self._mm.close()
        except BufferError:
            # numpy views handed out to callers keep the mapping alive;
            # it is unmapped when the last one is collected
            pass
        os.close(self._fd)
        _CACHE.pop((os.getpid(), str(self.path)), None)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        c = self.config
        return f"PoolHandle({str(self.path)!r}, zones={c.zone_count}x{c.zone_size})"


def _map(path: Path, size: int) -> tuple[int, mmap.mmap]:
    fd = os.open(path, os.O_RDWR)
    try:
        mm = mmap.mmap(fd, size, mmap.MAP_SHARED, mmap.PROT_READ | mmap.PROT_WRITE)
    except (OSError, ValueError) as exc:
        os.close(fd)
        raise IoFailure(f"cannot map {path}: {exc}") from exc
    return fd, mm


def create_pool(config: PoolConfig) -> PoolHandle:
    config.validate()
    path = Path(config.path)
    if path.exists() and path.stat().st_size > 0:
        raise InvalidConfig(f"{path} already exists and is not empty")
    total = config.page_size + config.region_size
    try:
        with open(path, "wb") as f:
            f.truncate(total)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    fd, mm = _map(path, total)
    _HEADER.pack_into(
        mm, 0, MAGIC, FORMAT_VERSION, config.zone_size, config.zone_count,
        config.page_size, config.node_count, 1,
    )
    handle = PoolHandle(path, config, fd, mm)
    for z in range(config.zone_count):
        handle.write_u64(handle.zone_base(z) + ZONE_NODE, handle.home_node(z))
    bind_zones_to_nodes(handle)
    _CACHE[(os.getpid(), str(path))] = handle
    return handle


def open_pool(path: str | os.PathLike) -> PoolHandle:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read(_HEADER.size)
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise BadMagic(f"{path} is not a sharkle pool")
    magic, version, zone_size, zone_count, page_size, node_count, _ = _HEADER.unpack(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"pool format {version}, expected {FORMAT_VERSION}")
    config = PoolConfig(path, zone_count, zone_size, page_size, node_count)
    try:
        config.validate()
    except InvalidConfig as exc:
        raise BadMagic(f"corrupt header in {path}: {exc}") from exc
    total = page_size + config.region_size
    if path.stat().st_size < total:
        raise IoFailure(f"{path} is truncated")
    fd, mm = _map(path, total)
    return PoolHandle(path, config, fd, mm)


_CACHE: dict[tuple[int, str], PoolHandle] = {}


def attach(path: str | os.PathLike) -> PoolHandle:
    """Return this process's shared handle for ``path``, opening it once."""
    key = (os.getpid(), str(Path(path)))
    handle = _CACHE.get(key)
    if handle is None or handle._closed:
        handle = _CACHE[key] = open_pool(path)
    return handle


def bind_zones_to_nodes(pool: PoolHandle) -> bool:
    """Physically bind zones to their home node.

    CPython exposes no mbind(2); placement stays logical. Returns whether
    binding happened.
    """
    return False


def resolve(pool: PoolHandle, ref: int, size: int | None = None) -> memoryview:
    """Writable view of ``size`` bytes at ``ref`` (default: to the end of its zone)."""
    if ref <= 0 or ref >= pool.region_size:
        raise OutOfRange(f"ref {ref:#x} outside pool data region")
    if size is None:
        size = pool.zone_base(pool.zone_of(ref)) + pool.config.zone_size - ref
    if size < 0 or ref + size > pool.region_size:
        raise OutOfRange(f"{size} bytes at {ref:#x} exceed the data region")
    return pool.data[ref : ref + size]


def to_ref(pool: PoolHandle, accessor) -> GlobalRef:
    """Offset of the first byte of ``accessor`` (any buffer) within the pool."""
    if isinstance(accessor, np.ndarray):
        addr = accessor.__array_interface__["data"][0]
    else:
        mv = memoryview(accessor)
        if mv.nbytes == 0:
            raise NotInPool("empty accessor")
        addr = np.frombuffer(mv.cast("B"), dtype=np.uint8).__array_interface__["data"][0]
    offset = addr - pool.base_address
    if not 0 <= offset < pool.region_size:
        raise NotInPool(f"address {addr:#x} is not inside {pool!r}")
    return GlobalRef(offset)
