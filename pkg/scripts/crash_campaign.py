"""Crash an allocation workload at random steps and check recovery.

Each trial runs a malloc/free mix on a fresh heap with a fault hook that
raises at a chosen step, then checks the pool and bulk-frees the heap.

    python3 scripts/crash_campaign.py --trials 1000
"""

import argparse
import os
import random
import sys
import tempfile
import time
from collections import Counter

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from helpers import count_steps, crash_trial  # noqa: E402

from sharkle.broker import destroy_heap, verify_pool  # noqa: E402
from sharkle.pool import PoolConfig, create_pool  # noqa: E402


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--workloads", type=int, default=10, help="distinct seeded workloads")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def main():
    args = parse_args()
    rng = random.Random(args.seed)
    where = Counter()
    bad = 0
    t = time.perf_counter()
    with tempfile.TemporaryDirectory(dir="/dev/shm" if os.path.isdir("/dev/shm") else None) as d:
        pool = create_pool(PoolConfig(os.path.join(d, "pool"), zone_count=16, zone_size=1 << 20))
        steps = {}
        for w in range(args.workloads):
            steps[w], gen = count_steps(pool, w)
            destroy_heap(pool, gen)
        for _ in range(args.trials):
            w = rng.randrange(args.workloads)
            gen, name = crash_trial(pool, rng.randint(0, steps[w]), w)
            where[name or "completed"] += 1
            bad += not verify_pool(pool).clean
            destroy_heap(pool, gen)
            rep = verify_pool(pool)
            bad += not rep.clean or rep.total_live_bytes != 0
        pool.close()
    print(f"{args.trials} trials in {time.perf_counter() - t:.1f}s, {bad} failed checks")
    for name, count in where.most_common():
        print(f"  {name:16s} {count}")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
