"""Versioned asynchronous snapshots of attribute partitions.

``checkpoint_partitions`` copies each partition's record array into private
memory and returns; a background thread then persists the copies. A
snapshot only counts once its manifest has been renamed into place, after
the payload and manifest were both fsynced. Restart picks the newest
version that every partition holds intact.

On disk: ``<dir>/<dataset>/<partition>/<version>.payload`` holds the raw
record array, ``<version>.manifest`` is ``magic "SHKLSNAP" | dataset_id |
partition_id | version | payload_length | checksum`` (u64 little endian,
FNV-1a 64 over the payload).
"""

from __future__ import annotations

import errno
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import fnv1a64
from .broker import Heap
from .errors import ChecksumMismatch, ConcurrentWriter, DiskFull, IoFailure, NoCommonVersion, UnknownVersion
from .pool import PoolHandle
from .store import AttributePartition, AttributeSchema, RoutingTable, build_partition_from_records, build_routing_table

log = logging.getLogger(__name__)

SNAP_MAGIC = b"SHKLSNAP"
_MANIFEST = struct.Struct("<8sQQQQQ")


@dataclass(frozen=True)
class SnapshotManifest:
    dataset_id: int
    partition_id: int
    version: int
    payload_length: int
    checksum: int

    def pack(self) -> bytes:
        return _MANIFEST.pack(SNAP_MAGIC, self.dataset_id, self.partition_id, self.version, self.payload_length, self.checksum)

    @classmethod
    def unpack(cls, raw: bytes) -> "SnapshotManifest":
        if len(raw) != _MANIFEST.size:
            raise ChecksumMismatch(f"manifest is {len(raw)} bytes")
        magic, *fields = _MANIFEST.unpack(raw)
        if magic != SNAP_MAGIC:
            raise ChecksumMismatch("bad manifest magic")
        return cls(*fields)


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _durable_write(path: Path, data, fsync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        if fsync:
            os.fsync(f.fileno())
    os.replace(tmp, path)


class SnapshotStore:
    """Directory of snapshots, one subdirectory per dataset and partition."""

    def __init__(self, directory: str | os.PathLike, fsync: bool = True):
        self.root = Path(directory)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._checkpointers: dict[int, Checkpointer] = {}
        # versions resume past anything on disk, including ones torn by a crash
        self.base_version = self.max_version()

    def partition_dir(self, dataset_id: int, partition_id: int) -> Path:
        return self.root / str(dataset_id) / str(partition_id)

    def paths(self, dataset_id: int, partition_id: int, version: int) -> tuple[Path, Path]:
        d = self.partition_dir(dataset_id, partition_id)
        return d / f"{version}.payload", d / f"{version}.manifest"

    def listing(self, dataset_id: int) -> dict[int, list[int]]:
        """Partition id -> versions that have a committed manifest."""
        out: dict[int, list[int]] = {}
        base = self.root / str(dataset_id)
        if not base.is_dir():
            return out
        for pdir in base.iterdir():
            if not pdir.name.isdigit():
                continue
            versions = sorted(int(f.name.split(".")[0]) for f in pdir.glob("*.manifest") if f.name.split(".")[0].isdigit())
            out[int(pdir.name)] = versions
        return out

    def max_version(self, dataset_id: int | None = None) -> int:
        """Highest version with any file on disk for one dataset, or the whole store (0 if none)."""
        base = self.root if dataset_id is None else self.root / str(dataset_id)
        best = 0
        if base.is_dir():
            for f in base.glob("*/*/*" if dataset_id is None else "*/*"):
                head = f.name.split(".")[0]
                if head.isdigit():
                    best = max(best, int(head))
        return best

    def write_snapshot(self, dataset_id: int, partition_id: int, version: int, payload) -> SnapshotManifest:
        """Synchronously persist one partition copy with the shadow-write protocol."""
        payload = np.ascontiguousarray(payload).reshape(-1).view(np.uint8)
        manifest = SnapshotManifest(dataset_id, partition_id, version, payload.nbytes, fnv1a64(payload))
        ppath, mpath = self.paths(dataset_id, partition_id, version)
        ppath.parent.mkdir(parents=True, exist_ok=True)
        try:
            _durable_write(ppath, payload, self.fsync)
            # the manifest rename is the commit point
            _durable_write(mpath, manifest.pack(), self.fsync)
            if self.fsync:
                _fsync_dir(ppath.parent)
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise DiskFull(str(exc)) from exc
            raise IoFailure(str(exc)) from exc
        return manifest

    def read_valid(self, dataset_id: int, partition_id: int, version: int) -> bytes:
        """Payload of a committed snapshot, checked against its manifest."""
        ppath, mpath = self.paths(dataset_id, partition_id, version)
        try:
            manifest = SnapshotManifest.unpack(mpath.read_bytes())
            payload = ppath.read_bytes()
        except OSError as exc:
            raise ChecksumMismatch(f"{ppath}: {exc}") from exc
        if (manifest.dataset_id, manifest.partition_id, manifest.version) != (dataset_id, partition_id, version):
            raise ChecksumMismatch(f"{mpath} describes another snapshot")
        if len(payload) != manifest.payload_length or fnv1a64(payload) != manifest.checksum:
            raise ChecksumMismatch(f"{ppath} does not match its manifest")
        return payload

    def checkpointer(self, dataset_id: int) -> "Checkpointer":
        cp = self._checkpointers.get(dataset_id)
        if cp is None:
            cp = self._checkpointers[dataset_id] = Checkpointer(self, dataset_id)
        return cp

    def close(self) -> None:
        for cp in self._checkpointers.values():
            cp.drain()


class _Job:
    def __init__(self, version: int, copies: list):
        self.version = version
        self.copies = copies
        self.error: BaseException | None = None
        self.thread: threading.Thread | None = None


class Checkpointer:
    """Per-dataset version counter and background writer."""

    def __init__(self, store: SnapshotStore, dataset_id: int):
        self.store = store
        self.dataset_id = dataset_id
        # one store-wide base keeps datasets that are checkpointed together in step
        self._next = store.base_version + 1
        self._jobs: dict[int, _Job] = {}
        self._last: _Job | None = None

    def checkpoint(self, partitions: Sequence[AttributePartition]) -> int:
        if self._last is not None and self._last.thread is not None:
            # one outstanding checkpoint: bound memory to a single extra copy
            self._last.thread.join()
        copies = []
        for part in partitions:
            snap = part.record_array().copy()
            # a writer racing the copy bumps a version word the copy no longer matches
            vw = part.schema.raw_width
            if not np.array_equal(snap[:, vw:].view("<u8")[:, 0], part.versions):
                raise ConcurrentWriter(f"partition {part.partition_id} changed while being copied")
            copies.append((part.partition_id, snap))
        version = self._next
        self._next += 1
        job = _Job(version, copies)
        job.thread = threading.Thread(target=self._persist, args=(job,), name=f"ckpt-{self.dataset_id}-{version}", daemon=True)
        self._jobs[version] = job
        self._last = job
        job.thread.start()
        return version

    def _persist(self, job: _Job) -> None:
        try:
            while job.copies:
                pid, snap = job.copies.pop(0)
                self.store.write_snapshot(self.dataset_id, pid, job.version, snap)
        except BaseException as exc:  # surfaced by await_durable
            log.warning("checkpoint %s of dataset %s failed: %s", job.version, self.dataset_id, exc)
            job.error = exc
            job.copies.clear()

    def await_durable(self, version: int) -> None:
        job = self._jobs.get(version)
        if job is None:
            raise UnknownVersion(f"dataset {self.dataset_id} has no checkpoint {version} in flight")
        job.thread.join()
        if job.error is not None:
            raise job.error

    def drain(self) -> None:
        for job in self._jobs.values():
            job.thread.join()


def checkpoint_partitions(partitions: Sequence[AttributePartition], store: SnapshotStore, dataset_id: int = 0) -> int:
    """Copy partitions synchronously, persist asynchronously; returns the version."""
    return store.checkpointer(dataset_id).checkpoint(partitions)


def await_durable(store: SnapshotStore, version: int, dataset_id: int = 0) -> None:
    store.checkpointer(dataset_id).await_durable(version)


def _usable(store: SnapshotStore, dataset_id: int, pids: list[int], version: int) -> dict[int, bytes] | None:
    payloads = {}
    for pid in pids:
        try:
            payloads[pid] = store.read_valid(dataset_id, pid, version)
        except ChecksumMismatch as exc:
            log.warning("excluding version %s: %s", version, exc)
            return None
    return payloads


def common_version(store: SnapshotStore, dataset_ids: Sequence[int]) -> int:
    """Newest version intact for every partition of every listed dataset."""
    listings = {d: store.listing(d) for d in dataset_ids}
    sets = [set(vs) for lst in listings.values() for vs in lst.values()]
    if not sets or any(not lst for lst in listings.values()):
        raise NoCommonVersion("no snapshots found")
    for version in sorted(set.intersection(*sets), reverse=True):
        if all(_usable(store, d, sorted(lst), version) is not None for d, lst in listings.items()):
            return version
    raise NoCommonVersion(f"datasets {list(dataset_ids)} share no intact snapshot version")


def restore(
    store: SnapshotStore,
    pool: PoolHandle,
    heap: Heap,
    schema: AttributeSchema,
    dataset_id: int = 0,
    version: int | None = None,
) -> tuple[list[AttributePartition], RoutingTable, int]:
    """Rebuild a dataset's partitions and routing table from its newest common snapshot."""
    listing = store.listing(dataset_id)
    if not listing:
        raise NoCommonVersion(f"dataset {dataset_id} has no snapshots")
    pids = sorted(listing)
    if version is None:
        candidates = sorted(set.intersection(*(set(v) for v in listing.values())), reverse=True)
    else:
        candidates = [version]
    for v in candidates:
        payloads = _usable(store, dataset_id, pids, v)
        if payloads is None:
            continue
        refs = [build_partition_from_records(heap, pid, schema, payloads[pid]) for pid in pids]
        routing = build_routing_table(heap, refs, schema)
        return [routing.partition(pid) for pid in pids], routing, v
    raise NoCommonVersion(f"dataset {dataset_id}: no version is intact for all of {pids}")
