"""Workloads shared by the unit tests and the acceptance suite."""

import random

import numpy as np

from sharkle.broker import create_heap, size_class
from sharkle.errors import SimulatedCrash
from sharkle.pool import attach


def charged_bytes(size, page):
    """What the allocator accounts for a request: its slab class or whole pages."""
    bs = size_class(size, page)
    return bs if bs is not None else -(-size // page) * page


def churn(heap, seed, ops=60, max_size=3 * 4096 + 100):
    """A fixed mix of sub-page and multi-page mallocs and frees."""
    rng = random.Random(seed)
    live = []
    for _ in range(ops):
        if live and rng.random() < 0.45:
            heap.free(live.pop(rng.randrange(len(live))))
        else:
            live.append(heap.malloc(rng.choice([rng.randint(1, 2048), rng.randint(1, max_size)])))
    for ref in live:
        heap.free(ref)


class StepCounter:
    def __init__(self, crash_at=None):
        self.steps = 0
        self.crash_at = crash_at
        self.names = []

    def __call__(self, name):
        if self.steps == self.crash_at:
            raise SimulatedCrash(name)
        self.names.append(name)
        self.steps += 1


def count_steps(pool, seed=7):
    heap = create_heap(pool)
    counter = StepCounter()
    heap.fault_hook = counter
    churn(heap, seed)
    return counter.steps, heap.generation


def crash_trial(pool, step, seed=7):
    """Run the churn workload on a fresh heap and crash it at ``step``.

    Returns (generation, step name or None if the workload finished).
    """
    heap = create_heap(pool)
    counter = StepCounter(step)
    heap.fault_hook = counter
    try:
        churn(heap, seed)
    except SimulatedCrash as exc:
        return heap.generation, str(exc)
    return heap.generation, None


def stress_worker(args):
    """Random malloc/free on a private heap with shadow accounting.

    Sizes are log-uniform in [1 B, max_size]; every live block carries a
    tag at both ends so overlapping allocations would be caught on free.
    """
    path, seed, ops, max_size, nodes = args
    pool = attach(path)
    heap = create_heap(pool)
    rng = np.random.default_rng(seed)
    page = pool.config.page_size
    live = {}
    shadow = 0
    tag = np.uint64(heap.generation << 32)
    corrupt = 0
    for i in range(ops):
        if live and (rng.random() < 0.5 or len(live) > 48):
            ref = list(live)[int(rng.integers(len(live)))]
            size, t = live.pop(ref)
            head = pool.u8[ref : ref + min(size, 8)].copy()
            expect = np.frombuffer(np.uint64(t).tobytes(), np.uint8)[: min(size, 8)]
            if not np.array_equal(head, expect):
                corrupt += 1
            heap.free(ref)
            shadow -= charged_bytes(size, page)
        else:
            size = int(np.exp(rng.uniform(0, np.log(max_size))))
            hint = int(rng.integers(nodes)) if rng.random() < 0.5 else None
            ref = heap.malloc(size, hint)
            t = int(tag) | i
            pool.u8[ref : ref + min(size, 8)] = np.frombuffer(np.uint64(t).tobytes(), np.uint8)[: min(size, 8)]
            live[ref] = (size, t)
            shadow += charged_bytes(size, page)
    return heap.generation, shadow, heap.live_bytes, corrupt, sorted((r, s) for r, (s, _) in live.items())
