"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines go straight to
the terminal even when output capture is on.
"""

import csv
import hashlib
import multiprocessing
import os
import random
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest
from helpers import count_steps, crash_trial, stress_worker

from sharkle import dataflow as df
from sharkle.bench import main as bench_main
from sharkle.bp import belief_propagation, exact_marginals, load_bp, new_messages, random_model
from sharkle.broker import create_heap, destroy_heap, owned_zones, verify_pool
from sharkle.checkpoint import SnapshotStore, restore
from sharkle.dataflow import JobConfig, Runner
from sharkle.errors import NoCommonVersion
from sharkle.graph import erdos_renyi, load_pagerank_graph, pagerank, pagerank_dense, random_tree
from sharkle.shuffle import (
    RecordBatch,
    Scheme,
    baseline_shuffle,
    create_session,
    map_write,
    reduce_columns,
    release_session,
)
from sharkle.store import AttributeSchema, build_partition


@pytest.fixture
def report(capsys):
    def emit(num, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def test_c01_crash_points_recover(make_pool, report):
    pool = make_pool(zone_count=16, zone_size=1 << 20)
    rng = random.Random(1)
    start = time.perf_counter()
    trials = defects = leaked = 0
    for seed in range(10):
        steps, gen = count_steps(pool, seed)
        destroy_heap(pool, gen)
        # the step count itself means "no crash": the workload completes
        for step in rng.choices(range(steps + 1), k=100):
            gen, _ = crash_trial(pool, step, seed)
            defects += not verify_pool(pool).clean
            owned = len(owned_zones(pool, gen))
            if destroy_heap(pool, gen) != owned:
                leaked += 1
            rep = verify_pool(pool)
            leaked += rep.total_live_bytes != 0 or any(z.owner for z in rep.zones)
            trials += 1
    elapsed = time.perf_counter() - start
    ok = trials == 1000 and defects == 0 and leaked == 0 and elapsed < 120
    assert report(1, ok, f"{trials} crash points, {defects} unclean pools, {leaked} incomplete reclaims, {elapsed:.1f}s")


def test_c02_concurrent_heaps_match_shadow(make_pool, report):
    pool = make_pool(zone_count=96, zone_size=8 << 20, node_count=2)
    jobs = [(str(pool.path), seed, 25_000, 4 << 20, 2) for seed in range(4)]
    with multiprocessing.get_context("fork").Pool(4) as workers:
        results = workers.map(stress_worker, jobs)
    rep = verify_pool(pool)
    mismatched = corrupt = 0
    spans = []
    for gen, shadow, live, bad, blocks in results:
        mismatched += not (shadow == live == rep.live_bytes.get(gen, 0))
        corrupt += bad
        spans += blocks
    spans.sort()
    overlaps = sum(a + s > b for (a, s), (b, _) in zip(spans, spans[1:]))
    ok = rep.clean and mismatched == 0 and corrupt == 0 and overlaps == 0
    assert report(2, ok, f"4 heaps x 25000 ops, {len(rep.defects)} defects, {mismatched} shadow mismatches, {corrupt} corrupt tags, {overlaps} overlaps")


def _records(n, maps, seed):
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, n // 4, n)
    vals = rng.integers(-(2**40), 2**40, n)
    bounds = np.linspace(0, n, maps + 1).astype(int)
    return [RecordBatch.from_arrays(keys[a:b], vals[a:b].astype("<i8")) for a, b in zip(bounds, bounds[1:])]


def _digest(pairs):
    h = hashlib.sha256()
    for k, v in sorted(pairs):
        h.update(repr((k, v)).encode())
    return h.hexdigest()


def test_c03_shuffle_grid(make_pool, report):
    pool = make_pool(zone_count=64, zone_size=4 << 20)
    n = 100_000
    start = time.perf_counter()
    failures = []
    for scheme in Scheme:
        for maps in (1, 4, 8):
            for reduces in (1, 4, 8):
                data = _records(n, maps, seed=maps * 10 + reduces)
                oracle = sorted((k, v) for b in data for k, v in zip(b.keys.tolist(), b.values.view("<i8")[:, 0].tolist()))
                heap = create_heap(pool)
                session = create_session(pool, heap, scheme, maps, reduces)
                for m, b in enumerate(data):
                    map_write(session, m, b)
                outs = [reduce_columns(session, r) for r in range(reduces)]
                got, sums = [], {}
                ordered = True
                for out in outs:
                    if out is None:
                        continue
                    vals = out.values.copy().view("<i8")[:, 0].tolist()
                    keys = out.keys.tolist()
                    if scheme is Scheme.PASS_THROUGH:
                        got += zip(keys, vals)
                        continue
                    for i, k in enumerate(keys):
                        got += ((k, v) for v in vals[out.offsets[i] : out.offsets[i + 1]])
                    if scheme is Scheme.SORT_MERGE:
                        # global order needs a range partitioner; within a reducer keys must ascend
                        ordered &= keys == sorted(set(keys))
                    else:
                        sums.update(zip(keys, out.fold(np.add).tolist()))
                release_session(session)
                destroy_heap(pool, heap.generation)
                tag = f"{scheme.name} {maps}x{reduces}"
                if sorted(got) != oracle:
                    failures.append(f"{tag} multiset")
                if not ordered:
                    failures.append(f"{tag} order")
                if scheme is Scheme.HASH_MERGE:
                    fold = {}
                    for k, v in oracle:
                        fold[k] = fold.get(k, 0) + v
                    if sums != fold:
                        failures.append(f"{tag} fold")
                base = baseline_shuffle([b.records() for b in data], maps, reduces, scheme)
                flat = []
                for recs in base:
                    for k, v in recs:
                        if isinstance(v, list):
                            flat += ((k, int.from_bytes(x, "little", signed=True)) for x in v)
                        else:
                            flat.append((k, int.from_bytes(v, "little", signed=True)))
                if _digest(flat) != _digest(got):
                    failures.append(f"{tag} baseline checksum")
    # SortMerge global order across reducers, through the sort operator's range partitioner
    data = _records(n, 8, seed=99)
    with Runner(JobConfig(partitions=8)) as r:
        if not df.is_globally_sorted(df.sort_by(r, data)):
            failures.append("SORT_MERGE global order")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    assert report(3, ok, f"27 configurations in {elapsed:.1f}s" + (f", failed: {failures}" if failures else ""))


def _bench_rows(tmp_path, *argv):
    out = tmp_path / "rows.csv"
    assert bench_main([*argv, "--csv", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    return {r["engine"]: r for r in rows}


def test_c04_reduceby_speedup(tmp_path, report, capsys):
    threads = os.cpu_count() or 1
    rows = _bench_rows(tmp_path, "micro", "reduceby", "--pairs", "4000000", "--engines", "both", "--repeats", "5")
    ratio = float(rows["baseline"]["elapsed_ms"]) / float(rows["shared_memory"]["elapsed_ms"])
    same = rows["baseline"]["result_checksum"] == rows["shared_memory"]["result_checksum"]
    others = {}
    for op in ("groupby", "sortby", "partitionby"):
        r = _bench_rows(tmp_path, "micro", op, "--engines", "both")
        others[op] = round(float(r["baseline"]["elapsed_ms"]) / float(r["shared_memory"]["elapsed_ms"]), 2)
    capsys.readouterr()
    detail = f"reduceby baseline/shared {ratio:.2f}, checksums {'equal' if same else 'differ'}, other ratios {others}"
    if threads < 8:
        report(4, False, f"not evaluable: host has {threads} hw thread(s), criterion needs 8; measured {detail}")
        pytest.skip(f"needs >= 8 hardware threads, host has {threads}")
    assert report(4, ratio >= 1.3 and same, detail)


def test_c05_sort_million(tmp_path, report, capsys):
    rows = _bench_rows(tmp_path, "sort", "--pairs", "1000000", "--engines", "both")
    err = capsys.readouterr().err
    sorted_ok = err.count("globally sorted pass") == 2
    same = rows["baseline"]["result_checksum"] == rows["shared_memory"]["result_checksum"]
    assert report(5, sorted_ok and same, f"globally sorted on both engines: {sorted_ok}, checksums equal: {same}")


def test_c06_pagerank_oracle(report):
    n, iters = 1000, 20
    src, dst = erdos_renyi(n, 8000, seed=6)
    # some vertices lose their out-edges so the dangling path is exercised
    keep = src % 13 != 0
    src, dst = src[keep], dst[keep]
    sums = []
    with Runner(JobConfig(partitions=4)) as r:
        ranks = pagerank(r, load_pagerank_graph(r, n, src, dst), iters, on_iteration=lambda it, s: sums.append(s))
    err = float(np.max(np.abs(ranks - pagerank_dense(n, src, dst, iters))))
    drift = max(abs(s - 1) for s in sums)
    ok = err <= 1e-9 and drift <= 1e-12 and len(sums) == iters
    assert report(6, ok, f"max error {err:.2e}, max |sum-1| {drift:.2e} over {len(sums)} iterations")


def test_c07_tree_bp_exact(report):
    worst, stuck, stops = 0.0, [], []
    with Runner(JobConfig(partitions=3)) as r:
        for seed in range(20):
            n = 2 + seed % 11
            u, v = random_tree(n, seed)
            model = random_model(n, 3, seed)
            graph = load_bp(r, n, u, v, model)
            b = belief_propagation(r, graph, model, n, 1e-6).beliefs
            worst = max(worst, float(np.max(np.abs(b - exact_marginals(n, u, v, model)))))
            # converged: one more update leaves every message where it is
            fwd, bwd = graph.messages()
            nf, nb = new_messages(b[u], b[v], fwd, bwd, model.psi)
            if max(np.max(np.abs(nf - fwd), initial=0), np.max(np.abs(nb - bwd), initial=0)) >= 1e-6:
                stuck.append(seed)
            # the stopping test sees the zero change one iteration after the fixed point
            stops.append(belief_propagation(r, load_bp(r, n, u, v, model), model, 3 * n, 1e-6).iterations - n)
    ok = worst <= 1e-6 and not stuck
    detail = f"20 trees n in [2, 12], max error {worst:.2e}, not at a fixed point after n iterations: {stuck}, stop test fires at n{max(stops):+d} at worst"
    assert report(7, ok, detail)


def _bp_graph(edges, seed):
    n = edges // 4
    u, v = erdos_renyi(n, edges, seed=seed, directed=False)
    return n, u, v, random_model(n, 3, seed)


def test_c08_gather_vs_shuffle(report):
    n, u, v, model = _bp_graph(100_000, 8)
    times = {"gather": [], "shuffle": []}
    beliefs = {}
    with Runner(JobConfig(partitions=4)) as r:
        for _ in range(5):
            for mode in times:
                graph = load_bp(r, n, u, v, model)
                t = time.perf_counter()
                beliefs[mode] = belief_propagation(r, graph, model, 5, 1e-15, mode=mode).beliefs
                times[mode].append(time.perf_counter() - t)
    g, s = statistics.median(times["gather"]), statistics.median(times["shuffle"])
    same = np.array_equal(beliefs["gather"], beliefs["shuffle"])
    assert report(8, same and g < s, f"bit-identical: {same}, median gather {g:.3f}s vs shuffle {s:.3f}s")


def test_c09_checkpoint_overhead_and_kill(tmp_path, report):
    n, u, v, model = _bp_graph(100_000, 9)
    plain, ckpt = [], []
    with Runner(JobConfig(partitions=4)) as r:
        for i in range(5):
            for store, sink in ((None, plain), (SnapshotStore(tmp_path / f"ov{i}"), ckpt)):
                graph = load_bp(r, n, u, v, model)
                t = time.perf_counter()
                belief_propagation(r, graph, model, 5, 1e-15, store=store, checkpoint_every=1)
                sink.append(time.perf_counter() - t)
    overhead = statistics.median(ckpt) / statistics.median(plain) - 1

    args = ["-m", "sharkle.bench", "bp", "--edges", "100000", "--vertices", str(n), "--iterations", "6", "--tol", "1e-15", "--seed", "9"]
    d = tmp_path / "kill"
    killed = subprocess.run([sys.executable, *args, "--checkpoint-every", "1", "--ckpt-dir", str(d), "--kill-at", "3"], capture_output=True)
    resumed = subprocess.run(
        [sys.executable, *args, "--checkpoint-every", "1", "--ckpt-dir", str(d), "--resume", "--beliefs-out", str(tmp_path / "a.npy")],
        capture_output=True,
        text=True,
    )
    clean = subprocess.run([sys.executable, *args, "--beliefs-out", str(tmp_path / "b.npy")], capture_output=True, text=True)
    identical = (
        killed.returncode == -9
        and resumed.returncode == 0
        and "resumed from snapshot version" in resumed.stderr
        and clean.returncode == 0
        and np.array_equal(np.load(tmp_path / "a.npy"), np.load(tmp_path / "b.npy"))
    )
    ok = overhead <= 0.15 and identical
    assert report(9, ok, f"median checkpoint overhead {overhead:+.1%} (limit +15%), kill -9 restore bit-identical: {identical}")


def test_c10_partition_footprint(make_pool, report):
    pool = make_pool(zone_count=2, zone_size=128 << 20)
    heap = create_heap(pool)
    schema = AttributeSchema.of(belief=24, unary=24)
    n = 1_000_000
    rng = np.random.default_rng(10)
    build_partition(heap, 0, schema, (np.arange(n) * 3, rng.integers(0, 256, (n, 48), dtype=np.uint8)))
    raw = n * schema.raw_width
    used = verify_pool(pool).live_bytes[heap.generation]
    assert report(10, used <= 1.5 * raw, f"{used} bytes for {raw} raw bytes, {used / raw:.3f}x")


def test_c11_restore_scenarios(make_pool, tmp_path, report):
    pool = make_pool()
    schema = AttributeSchema.of(x=8)
    outcomes = []
    for name, plan, expect in (
        ("A:v1,v2 B:v1,v2", {0: (1, 2), 1: (1, 2)}, 2),
        ("A:v1,v2 B:v1", {0: (1, 2), 1: (1,)}, 1),
        ("A:v2 B:v1", {0: (2,), 1: (1,)}, NoCommonVersion),
    ):
        store = SnapshotStore(tmp_path / name.replace(" ", "_").replace(":", "").replace(",", ""))
        for pid, versions in plan.items():
            for ver in versions:
                rec = np.zeros(24, np.uint8)
                rec[8] = ver
                store.write_snapshot(0, pid, ver, rec)
        try:
            parts, _, got = restore(store, pool, create_heap(pool), schema)
            ok = got == expect and all(p.record_array().tobytes()[8] == expect for p in parts)
        except NoCommonVersion:
            got, ok = "NoCommonVersion", expect is NoCommonVersion
        outcomes.append((name, got, ok))
    assert report(11, all(ok for *_, ok in outcomes), "; ".join(f"{n} -> {g}" for n, g, _ in outcomes))
