"""``sharkle-bench``: run a workload under one or both engines and emit CSV rows."""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import signal
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import dataflow as df
from ._kernels import fnv1a64, warmup
from .bp import belief_propagation, load_bp, random_model, restore_bp
from .checkpoint import SnapshotStore
from .errors import NoCommonVersion
from .graph import erdos_renyi, load_pagerank_graph, pagerank, random_tree
from .pool import PoolConfig
from .shuffle import HashPartitioner

CSV_HEADER = ["workload", "engine", "workers", "partitions", "input_size", "elapsed_ms", "peak_pool_bytes", "result_checksum"]
MICRO_OPS = ("groupby", "reduceby", "sortby", "partitionby", "join")
# default input sizes of the micro-benchmarks
MICRO_PAIRS = {"groupby": 2_000_000, "join": 2_000_000, "partitionby": 2_000_000, "reduceby": 4_000_000, "sortby": 4_000_000}


@dataclass
class Row:
    workload: str
    engine: str
    workers: int
    partitions: int
    input_size: int
    elapsed_ms: float
    peak_pool_bytes: int
    result_checksum: int

    def as_list(self) -> list:
        return [self.workload, self.engine, self.workers, self.partitions, self.input_size, f"{self.elapsed_ms:.3f}", self.peak_pool_bytes, f"{self.result_checksum:016x}"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--partitions", type=int, default=None, help="defaults to max(4, workers)")
    common.add_argument("--engines", choices=["shared", "baseline", "both"], default="shared")
    common.add_argument("--executor", choices=df.EXECUTORS, default="process")
    common.add_argument("--pool", default=None, help="pool file to create (removed afterwards)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--repeats", type=int, default=1, help="report the median of this many runs")
    common.add_argument("--csv", default=None, help="also write rows to this file")

    p = argparse.ArgumentParser(prog="sharkle-bench", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("micro", parents=[common], help="GroupBy/ReduceBy/SortBy/PartitionBy/Join")
    m.add_argument("op", choices=MICRO_OPS)
    m.add_argument("--pairs", type=int, default=None)
    m.add_argument("--keys", type=int, default=None, help="key space (default pairs // 8)")

    s = sub.add_parser("sort", parents=[common], help="100-byte-record sort, checked for global order")
    s.add_argument("--pairs", type=int, default=1_000_000)

    pr = sub.add_parser("pagerank", parents=[common])
    pr.add_argument("--vertices", type=int, default=10_000)
    pr.add_argument("--edges", type=int, default=None, help="default 8 * vertices")
    pr.add_argument("--iterations", type=int, default=10)

    for name in ("bp", "ckpt"):
        b = sub.add_parser(name, parents=[common], help="belief propagation" if name == "bp" else "BP with and without checkpoints")
        b.add_argument("--vertices", type=int, default=1000)
        b.add_argument("--edges", type=int, default=None, help="default 4 * vertices")
        b.add_argument("--tree", action="store_true", help="use a random tree instead of a random graph")
        b.add_argument("--states", type=int, default=3)
        b.add_argument("--iterations", type=int, default=10)
        b.add_argument("--tol", type=float, default=1e-9)
        b.add_argument("--checkpoint-every", type=int, default=0 if name == "bp" else 1)
        b.add_argument("--ckpt-dir", default=None)
        b.add_argument("--mode", choices=["gather", "shuffle"], default="gather")
        if name == "bp":
            b.add_argument("--resume", action="store_true", help="continue from the newest common snapshot in --ckpt-dir")
            b.add_argument("--kill-at", type=int, default=None, help="SIGKILL this process after that iteration")
            b.add_argument("--beliefs-out", default=None, help="save final beliefs (.npy)")
    return p


def _config(args, engine: str) -> df.JobConfig:
    partitions = args.partitions or max(4, args.workers)
    pool = PoolConfig(args.pool, zone_count=256, zone_size=16 << 20) if args.pool else None
    return df.JobConfig(workers=args.workers, partitions=partitions, engine=engine, executor=args.executor, pool=pool, seed=args.seed)


def _engines(args) -> list[str]:
    return {"shared": ["shared_memory"], "baseline": ["baseline"], "both": ["shared_memory", "baseline"]}[args.engines]


def _timed(args, engine: str, body) -> tuple[float, int, int]:
    """Median elapsed ms over repeats, peak pool bytes, checksum of the last run."""
    times, peak, checksum = [], 0, 0
    for _ in range(max(1, args.repeats)):
        with df.Runner(_config(args, engine)) as runner:
            elapsed, checksum = body(runner)
            peak = max(peak, runner.peak_pool_bytes)
        times.append(elapsed)
    return statistics.median(times) * 1e3, peak, checksum


def _micro(args, runner: df.Runner):
    op = args.op
    pairs = args.pairs or MICRO_PAIRS[op]
    P = runner.config.partitions
    data = df.generate_pairs(pairs, P, key_space=args.keys, seed=args.seed)
    if op == "join":
        # a dimension table with one row per key: output size equals the left side
        key_space = args.keys or max(1, pairs // 8)
        keys = np.arange(key_space, dtype=np.int64)
        right = [df.RecordBatch.from_arrays(keys[p::P], (keys[p::P] * 3).astype("<i8")) for p in range(P)]
    t = time.perf_counter()
    if op == "groupby":
        out = df.group_by(runner, data)
    elif op == "reduceby":
        out = df.reduce_by(runner, data)
    elif op == "sortby":
        out = df.sort_by(runner, data)
    elif op == "partitionby":
        out = df.partition_by(runner, data, HashPartitioner(P))
    else:
        out = df.join(runner, data, right)
    elapsed = time.perf_counter() - t
    if op == "sortby" and not df.is_globally_sorted(out):
        raise AssertionError("sortby output is not globally sorted")
    return elapsed, df.result_checksum(out)


def _sort(args, runner: df.Runner):
    data = df.generate_sort_records(args.pairs, runner.config.partitions, seed=args.seed)
    t = time.perf_counter()
    out = df.sort_by(runner, data)
    elapsed = time.perf_counter() - t
    ok = df.is_globally_sorted(out) and sum(len(b) for b in out if b is not None) == args.pairs
    print(f"sort {runner.config.engine}: globally sorted {'pass' if ok else 'FAIL'}", file=sys.stderr)
    if not ok:
        raise AssertionError("sort output is not globally sorted")
    return elapsed, df.result_checksum(out)


def _pagerank(args, runner: df.Runner):
    n = args.vertices
    src, dst = erdos_renyi(n, args.edges or 8 * n, seed=args.seed)
    graph = load_pagerank_graph(runner, n, src, dst)
    t = time.perf_counter()
    ranks = pagerank(runner, graph, args.iterations)
    return time.perf_counter() - t, fnv1a64(ranks)


def bp_inputs(args):
    n = args.vertices
    if args.tree:
        u, v = random_tree(n, args.seed)
    else:
        u, v = erdos_renyi(n, args.edges or 4 * n, seed=args.seed, directed=False)
    return n, u, v, random_model(n, args.states, args.seed)


def _bp(args, runner: df.Runner, every: int, resume: bool = False, kill_at: int | None = None):
    n, u, v, model = bp_inputs(args)
    scratch = None
    ckpt_dir = args.ckpt_dir
    if every and ckpt_dir is None:
        ckpt_dir = scratch = tempfile.mkdtemp(prefix="sharkle-ckpt-")
    store = SnapshotStore(ckpt_dir) if ckpt_dir else None
    graph = None
    if resume and store is not None:
        try:
            graph, version = restore_bp(runner, store, n, u, v, model)
            print(f"resumed from snapshot version {version} at iteration {graph.iteration}", file=sys.stderr)
        except NoCommonVersion:
            print("no usable snapshot, starting fresh", file=sys.stderr)
    if graph is None:
        graph = load_bp(runner, n, u, v, model)

    def on_iteration(it, delta):
        if kill_at is not None and it == kill_at:
            os.kill(os.getpid(), signal.SIGKILL)

    try:
        t = time.perf_counter()
        res = belief_propagation(runner, graph, model, args.iterations, args.tol, args.mode, store, every, on_iteration)
        elapsed = time.perf_counter() - t
    finally:
        if scratch:
            shutil.rmtree(scratch, ignore_errors=True)
    if getattr(args, "beliefs_out", None):
        np.save(args.beliefs_out, res.beliefs)
    print(f"bp: {res.iterations} iterations, last delta {res.deltas[-1] if res.deltas else float('nan'):.3e}", file=sys.stderr)
    return elapsed, fnv1a64(res.beliefs)


def run(args) -> list[Row]:
    warmup()
    rows = []
    cmd = args.command
    if cmd == "ckpt":
        for label, every in (("bp", 0), ("bp+ckpt", args.checkpoint_every)):
            ms, peak, checksum = _timed(args, "shared_memory", lambda r: _bp(args, r, every))
            rows.append(Row(label, "shared_memory", args.workers, args.partitions or max(4, args.workers), args.vertices, ms, peak, checksum))
        print(f"checkpoint overhead: {rows[1].elapsed_ms / rows[0].elapsed_ms - 1:+.1%}", file=sys.stderr)
        return rows
    for engine in _engines(args):
        if cmd == "micro":
            body, workload, size = (lambda r: _micro(args, r)), args.op, args.pairs or MICRO_PAIRS[args.op]
        elif cmd == "sort":
            body, workload, size = (lambda r: _sort(args, r)), "sort", args.pairs
        elif cmd == "pagerank":
            body, workload, size = (lambda r: _pagerank(args, r)), "pagerank", args.vertices
        else:
            body = lambda r: _bp(args, r, args.checkpoint_every, args.resume, args.kill_at)  # noqa: E731
            workload, size = "bp", args.vertices
        ms, peak, checksum = _timed(args, engine, body)
        rows.append(Row(workload, engine, args.workers, args.partitions or max(4, args.workers), size, ms, peak, checksum))
    if len(rows) == 2:
        same = rows[0].result_checksum == rows[1].result_checksum
        ratio = rows[1].elapsed_ms / rows[0].elapsed_ms
        print(f"checksums {'match' if same else 'DIFFER'}; baseline/shared elapsed ratio {ratio:.2f}", file=sys.stderr)
    return rows


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1 or (args.partitions is not None and args.partitions < args.workers):
        parser.error("need partitions >= workers >= 1")
    rows = run(args)
    out = csv.writer(sys.stdout)
    out.writerow(CSV_HEADER)
    for row in rows:
        out.writerow(row.as_list())
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for row in rows:
                w.writerow(row.as_list())
    return 0


if __name__ == "__main__":
    sys.exit(main())
