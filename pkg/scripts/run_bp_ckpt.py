"""Checkpoint overhead of BP and a kill -9 / resume round trip.

Runs BP with and without per-iteration checkpoints, reports the median
overhead, then kills a checkpointing run partway and checks that resuming
it reproduces the uninterrupted beliefs bit for bit.

    python3 scripts/run_bp_ckpt.py --edges 100000 --iterations 5
"""

import argparse
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from sharkle.bp import belief_propagation, load_bp, random_model
from sharkle.checkpoint import SnapshotStore
from sharkle.dataflow import JobConfig, Runner
from sharkle.graph import erdos_renyi


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--edges", type=int, default=100_000)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--partitions", type=int, default=4)
    p.add_argument("--kill-at", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fsync", action="store_true")
    return p.parse_args()


def overhead(args, tmp):
    n = args.edges // 4
    u, v = erdos_renyi(n, args.edges, seed=args.seed, directed=False)
    model = random_model(n, 3, args.seed)
    times = {"plain": [], "ckpt": []}
    with Runner(JobConfig(partitions=args.partitions)) as r:
        for i in range(args.repeats):
            for label in times:
                store = SnapshotStore(tmp / f"run{i}", fsync=not args.no_fsync) if label == "ckpt" else None
                graph = load_bp(r, n, u, v, model)
                t = time.perf_counter()
                belief_propagation(r, graph, model, args.iterations, 1e-15, store=store, checkpoint_every=1)
                times[label].append(time.perf_counter() - t)
    plain, ckpt = statistics.median(times["plain"]), statistics.median(times["ckpt"])
    print(f"median plain {plain:.3f}s, with checkpoints {ckpt:.3f}s, overhead {ckpt / plain - 1:+.1%}")


def kill_resume(args, tmp):
    base = [sys.executable, "-m", "sharkle.bench", "bp", "--vertices", str(args.edges // 4), "--edges", str(args.edges)]
    base += ["--iterations", str(args.iterations + 2), "--tol", "1e-15", "--seed", str(args.seed)]
    ck = ["--checkpoint-every", "1", "--ckpt-dir", str(tmp / "kill")]
    killed = subprocess.run([*base, *ck, "--kill-at", str(args.kill_at)], capture_output=True)
    print(f"killed run exit status {killed.returncode}")
    subprocess.run([*base, *ck, "--resume", "--beliefs-out", str(tmp / "resumed.npy")], check=True, capture_output=True)
    subprocess.run([*base, "--beliefs-out", str(tmp / "clean.npy")], check=True, capture_output=True)
    same = np.array_equal(np.load(tmp / "resumed.npy"), np.load(tmp / "clean.npy"))
    print(f"resumed beliefs bit-identical to an uninterrupted run: {same}")


if __name__ == "__main__":
    args = parse_args()
    with tempfile.TemporaryDirectory() as d:
        overhead(args, Path(d))
        kill_resume(args, Path(d))
