"""A small bulk-synchronous dataflow layer over the shuffle engine.

A dataset is a list of partitions, each a :class:`RecordBatch` (or a
grouped :class:`ReduceOutput`). Every operator is one shuffle: a map stage
over input partitions, a barrier, and a reduce stage over output
partitions. The ``shared_memory`` engine moves records through the pool;
the ``baseline`` engine serializes each record into a file per
(map, reducer) pair and decodes it on the reduce side. Both engines finish
reducer output with the same columnar code, so results agree bit for bit.
"""

from __future__ import annotations

import itertools
import multiprocessing
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._kernels import fnv1a64
from .broker import Heap, create_heap, destroy_heap, pool_live_bytes
from .errors import StageIncomplete
from .pool import PoolConfig, PoolHandle, create_pool
from .shuffle import (
    HashPartitioner,
    KeyKind,
    RangePartitioner,
    RecordBatch,
    ReduceOutput,
    Scheme,
    baseline_map,
    create_session,
    decode_records,
    map_write,
    merge_stream,
    reduce_columns,
    release_session,
    sortable_keys,
)

ENGINES = ("shared_memory", "baseline")
EXECUTORS = ("process", "thread")


@dataclass
class JobConfig:
    workers: int = 1
    partitions: int = 4
    engine: str = "shared_memory"
    executor: str = "process"
    pool: PoolConfig | None = None
    seed: int = 0
    schemes: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.partitions >= self.workers >= 1:
            raise ValueError(f"need partitions >= workers >= 1, got {self.partitions} and {self.workers}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.executor not in EXECUTORS:
            raise ValueError(f"unknown executor {self.executor!r}")

    def scheme_for(self, op: str, default: Scheme) -> Scheme:
        return Scheme(self.schemes.get(op, default))


def default_pool_config(directory: str | os.PathLike, zone_size: int = 16 << 20, zone_count: int = 256) -> PoolConfig:
    return PoolConfig(str(Path(directory) / "pool.shkl"), zone_count=zone_count, zone_size=zone_size)


def _scratch_root() -> str | None:
    return "/dev/shm" if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK) else None


class Runner:
    """Owns the pool, a driver heap and the worker executor; runs stages with barriers."""

    def __init__(self, config: JobConfig | None = None):
        self.config = config = config or JobConfig()
        config.validate()
        self._scratch = tempfile.mkdtemp(prefix="sharkle-", dir=_scratch_root())
        self.pool: PoolHandle = create_pool(config.pool or default_pool_config(self._scratch))
        self.heap: Heap = create_heap(self.pool)
        self.peak_pool_bytes = 0
        self._executor = None
        self._ids = itertools.count()
        self._shuffle_dir = Path(tempfile.mkdtemp(prefix="sharkle-shuffle-"))

    # -- execution ----------------------------------------------------------

    def _get_executor(self):
        if self._executor is None:
            if self.config.executor == "process":
                self._executor = ProcessPoolExecutor(self.config.workers, mp_context=multiprocessing.get_context("fork"))
            else:
                self._executor = ThreadPoolExecutor(self.config.workers)
        return self._executor

    def run_stage(self, fn: Callable, tasks: Sequence) -> list:
        """Run ``fn`` over ``tasks``; returns once every task finished (the barrier)."""
        if self.config.workers == 1 or len(tasks) <= 1:
            return [fn(t) for t in tasks]
        return list(self._get_executor().map(fn, tasks))

    def note_peak(self) -> int:
        live = pool_live_bytes(self.pool)
        self.peak_pool_bytes = max(self.peak_pool_bytes, live)
        return live

    def shuffle(self, maps: Sequence, scheme: Scheme, partitioner, finish: Callable, num_reduces: int | None = None) -> list:
        """One map stage, barrier, one reduce stage.

        ``maps`` holds one :class:`MapInput` (or a RecordBatch) per map task;
        ``finish(output, reduce_id)`` turns each reducer's ReduceOutput (None
        when empty) into the stage result.
        """
        R = num_reduces or partitioner.num_partitions
        maps = [m if isinstance(m, MapInput) else MapInput(m) for m in maps]
        if self.config.engine == "shared_memory":
            # release_session bulk-frees the heap hosting the registry, so give it its own
            session = create_session(self.pool, create_heap(self.pool), scheme, len(maps), R, partitioner)
            try:
                self.run_stage(_shared_map, [(session, i, m) for i, m in enumerate(maps)])
                self.note_peak()
                if not session.complete():
                    raise StageIncomplete("map stage finished without publishing every output")
                return self.run_stage(_shared_reduce, [(session, r, finish) for r in range(R)])
            finally:
                release_session(session)
        stage_dir = self._shuffle_dir / str(next(self._ids))
        stage_dir.mkdir()
        try:
            self.run_stage(_baseline_map_task, [(stage_dir, i, m, scheme, partitioner, R) for i, m in enumerate(maps)])
            return self.run_stage(_baseline_reduce_task, [(stage_dir, r, len(maps), scheme, finish) for r in range(R)])
        finally:
            shutil.rmtree(stage_dir, ignore_errors=True)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None
        if not self.pool._closed:
            destroy_heap(self.pool, self.heap.generation)
            path = self.pool.path
            self.pool.close()
            # the pool is scoped to the job
            Path(path).unlink(missing_ok=True)
        shutil.rmtree(self._scratch, ignore_errors=True)
        shutil.rmtree(self._shuffle_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class MapInput:
    """A map task's input: a batch, or ``produce(payload)`` evaluated on the worker."""

    payload: object
    produce: Callable | None = None

    def batch(self) -> RecordBatch:
        return self.payload if self.produce is None else self.produce(self.payload)


def _shared_map(task) -> int:
    session, map_id, inp = task
    map_write(session, map_id, inp.batch())
    return map_id


def _shared_reduce(task):
    session, reduce_id, finish = task
    return finish(reduce_columns(session, reduce_id), reduce_id)


def _baseline_map_task(task) -> int:
    stage_dir, map_id, inp, scheme, partitioner, R = task
    batch = inp.batch()
    blobs = baseline_map(batch.records() if len(batch) else [], scheme, partitioner)
    for r, blob in enumerate(blobs):
        (stage_dir / f"{map_id}-{r}.bin").write_bytes(blob)
    return map_id


def _baseline_reduce_task(task):
    stage_dir, reduce_id, num_maps, scheme, finish = task
    per_map = [decode_records((stage_dir / f"{m}-{reduce_id}.bin").read_bytes()) for m in range(num_maps)]
    return finish(records_to_output(scheme, list(merge_stream(scheme, per_map))), reduce_id)


def records_to_output(scheme: Scheme, merged: list) -> ReduceOutput | None:
    """Columnar form of a record-level merge result."""
    scheme = Scheme(scheme)
    if not merged:
        return None
    if scheme is Scheme.PASS_THROUGH:
        b = RecordBatch.from_records(merged)
        return ReduceOutput(scheme, b.key_kind, b.keys, b.values, None)
    flat = [(k, v) for k, vs in merged for v in vs]
    b = RecordBatch.from_records(flat)
    sizes = np.fromiter((len(vs) for _, vs in merged), np.int64, len(merged))
    offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    return ReduceOutput(scheme, b.key_kind, b.keys[offsets[:-1]], b.values, offsets)


# ---------------------------------------------------------------------------
# operators


def _rekey(payload) -> RecordBatch:
    batch, key_fn = payload
    return RecordBatch.from_arrays(key_fn(batch), batch.values)


def _inputs(data: Sequence[RecordBatch], key_fn) -> list[MapInput]:
    if key_fn is None:
        return [MapInput(b) for b in data]
    return [MapInput((b, key_fn), _rekey) for b in data]


def _expand(out: ReduceOutput | None) -> RecordBatch | None:
    if out is None:
        return None
    keys = out.keys if out.offsets is None else np.repeat(out.keys, np.diff(out.offsets), axis=0)
    return RecordBatch(out.key_kind, keys, out.values)


def _finish_group(out, reduce_id):
    return out


def _finish_records(out, reduce_id):
    return _expand(out)


def _finish_fold(out, reduce_id, ufunc=np.add, dtype="<i8"):
    if out is None:
        return None
    folded = out.fold(ufunc, dtype)
    return RecordBatch(out.key_kind, out.keys, np.ascontiguousarray(folded).view(np.uint8).reshape(len(out.keys), -1))


def group_by(runner: Runner, data: Sequence[RecordBatch], key_fn=None) -> list[ReduceOutput | None]:
    scheme = runner.config.scheme_for("group_by", Scheme.HASH_MERGE)
    return runner.shuffle(_inputs(data, key_fn), scheme, HashPartitioner(runner.config.partitions), _finish_group)


def reduce_by(runner: Runner, data: Sequence[RecordBatch], fold: np.ufunc = np.add, dtype="<i8", key_fn=None) -> list[RecordBatch | None]:
    """Fold values sharing a key; values are read as ``dtype`` vectors."""
    scheme = runner.config.scheme_for("reduce_by", Scheme.HASH_MERGE)
    finish = partial(_finish_fold, ufunc=fold, dtype=dtype)
    return runner.shuffle(_inputs(data, key_fn), scheme, HashPartitioner(runner.config.partitions), finish)


def sample_splitters(data: Sequence[RecordBatch], num_partitions: int, per_partition: int = 1000, seed: int = 0) -> RangePartitioner:
    rng = np.random.default_rng(seed)
    picks = []
    for b in data:
        if len(b):
            picks.append(b.take(rng.choice(len(b), min(per_partition, len(b)), replace=False)))
    if not picks:
        return RangePartitioner(np.zeros(0, np.int64))
    return RangePartitioner.from_sample(RecordBatch.concat(picks), num_partitions)


def sort_by(runner: Runner, data: Sequence[RecordBatch], key_fn=None) -> list[RecordBatch | None]:
    """Globally sorted output: reducer i holds the i-th key range, in order."""
    inputs = _inputs(data, key_fn)
    sample = [inp.batch() for inp in inputs] if key_fn is not None else list(data)
    partitioner = sample_splitters(sample, runner.config.partitions, seed=runner.config.seed)
    scheme = runner.config.scheme_for("sort_by", Scheme.SORT_MERGE)
    return runner.shuffle(inputs, scheme, partitioner, _finish_records)


def partition_by(runner: Runner, data: Sequence[RecordBatch], partitioner) -> list[RecordBatch | None]:
    scheme = runner.config.scheme_for("partition_by", Scheme.PASS_THROUGH)
    return runner.shuffle(_inputs(data, None), scheme, partitioner, _finish_records)


def _tag(payload) -> RecordBatch:
    batch, tag, width = payload
    vals = np.zeros((len(batch), width + 1), np.uint8)
    vals[:, 0] = tag
    vals[:, 1 : 1 + batch.value_width] = batch.values
    return RecordBatch(batch.key_kind, batch.keys, vals)


def _finish_join(out, reduce_id, lw, rw):
    if out is None:
        return None
    counts = np.diff(out.offsets)
    group = np.repeat(np.arange(len(counts)), counts)
    tag = out.values[:, 0]
    order = np.lexsort((tag, group))
    vals = out.values[order]
    left_n = np.bincount(group[tag == 0], minlength=len(counts))
    right_n = counts - left_n
    pairs = left_n * right_n
    total = int(pairs.sum())
    g = np.repeat(np.arange(len(counts)), pairs)
    within = np.arange(total) - np.repeat(np.cumsum(pairs) - pairs, pairs)
    li = out.offsets[:-1][g] + within // right_n[g]
    ri = out.offsets[:-1][g] + left_n[g] + within % right_n[g]
    joined = np.concatenate([vals[li, 1 : 1 + lw], vals[ri, 1 : 1 + rw]], axis=1)
    return RecordBatch(out.key_kind, out.keys[g], np.ascontiguousarray(joined))


def join(runner: Runner, left: Sequence[RecordBatch], right: Sequence[RecordBatch], key_fn=None) -> list[RecordBatch | None]:
    """Inner equi-join; each output value is the left value followed by the right value."""
    if key_fn is not None:
        left = [_rekey((b, key_fn)) for b in left]
        right = [_rekey((b, key_fn)) for b in right]
    lw = left[0].value_width if left else 0
    rw = right[0].value_width if right else 0
    width = max(lw, rw)
    maps = [MapInput((b, 0, width), _tag) for b in left] + [MapInput((b, 1, width), _tag) for b in right]
    scheme = runner.config.scheme_for("join", Scheme.HASH_MERGE)
    return runner.shuffle(maps, scheme, HashPartitioner(runner.config.partitions), partial(_finish_join, lw=lw, rw=rw))


# ---------------------------------------------------------------------------
# results


def flatten(parts: Sequence) -> RecordBatch | None:
    batches = [_expand(p) if isinstance(p, ReduceOutput) else p for p in parts]
    batches = [b for b in batches if b is not None and len(b)]
    return RecordBatch.concat(batches) if batches else None


def canonical_rows(parts: Sequence) -> np.ndarray:
    """All (key, value) records as byte rows in a canonical order."""
    b = flatten(parts)
    if b is None:
        return np.zeros((0, 0), np.uint8)
    keys = b.keys if b.key_kind is KeyKind.BYTES else b.keys.reshape(-1, 1).view(np.uint8)
    rows = np.ascontiguousarray(np.concatenate([keys, b.values], axis=1))
    return np.sort(rows.view(f"V{rows.shape[1]}").ravel()).view(np.uint8).reshape(rows.shape)


def result_checksum(parts: Sequence) -> int:
    """Order-insensitive FNV-1a checksum of an operator's output."""
    return fnv1a64(canonical_rows(parts))


def is_globally_sorted(parts: Sequence) -> bool:
    b = flatten(parts)
    if b is None:
        return True
    keys = sortable_keys(b.keys, b.key_kind)
    return bool(np.all(keys[1:] >= keys[:-1]))


# ---------------------------------------------------------------------------
# input generators


def generate_pairs(n: int, partitions: int, key_space: int | None = None, value_width: int = 8, seed: int = 0) -> list[RecordBatch]:
    """Uniform random int64 keys with small int64 values (value_width=8) or random bytes."""
    key_space = key_space or max(1, n // 8)
    out = []
    for p, size in enumerate(_split(n, partitions)):
        rng = np.random.default_rng([seed, p])
        keys = rng.integers(0, key_space, size, dtype=np.int64)
        if value_width == 8:
            values = rng.integers(0, 1000, size, dtype=np.int64).view(np.uint8).reshape(size, 8)
        else:
            values = rng.integers(0, 256, (size, value_width), dtype=np.uint8)
        out.append(RecordBatch(KeyKind.INT64, keys, values))
    return out


def generate_sort_records(n: int, partitions: int, seed: int = 0) -> list[RecordBatch]:
    """100-byte records with 10-byte random keys, the classic sort benchmark shape."""
    out = []
    for p, size in enumerate(_split(n, partitions)):
        rng = np.random.default_rng([seed, p, 1])
        keys = rng.integers(0, 256, (size, 10), dtype=np.uint8)
        values = rng.integers(0, 256, (size, 90), dtype=np.uint8)
        out.append(RecordBatch(KeyKind.BYTES, keys, values))
    return out


def _split(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (i < extra) for i in range(parts)]
