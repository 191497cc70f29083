"""Graph inputs and PageRank over the dataflow layer.

Vertices live in the attribute store, hash-partitioned by id; each edge
partition holds the out-edges of one vertex partition plus an address
table pointing at its source records, so contributions are computed by
reading ranks straight out of shared memory. Contributions reach their
destination vertices through a ``reduce_by`` shuffle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from .dataflow import MapInput, Runner
from .shuffle import HashPartitioner, KeyKind, RecordBatch, Scheme
from .store import (
    AddressTable,
    AttributePartition,
    AttributeSchema,
    RoutingTable,
    build_address_table,
    build_partition,
    build_routing_table,
    gather,
)

PAGERANK_SCHEMA = AttributeSchema.of(rank=8, degree=8)


def erdos_renyi(n: int, m: int, seed: int = 0, directed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """About ``m`` distinct random edges without self loops (undirected ones as u < v)."""
    rng = np.random.default_rng([seed, 17])
    src = rng.integers(0, n, int(m * 1.1) + 16)
    dst = rng.integers(0, n, len(src))
    keep = src != dst
    src, dst = src[keep], dst[keep]
    if not directed:
        src, dst = np.minimum(src, dst), np.maximum(src, dst)
    code = np.unique(src * n + dst)
    code = code[rng.permutation(len(code))[:m]]
    code.sort()
    return (code // n).astype(np.int64), (code % n).astype(np.int64)


def random_tree(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random recursive tree: vertex i attaches to a uniform earlier vertex."""
    rng = np.random.default_rng([seed, 23])
    child = np.arange(1, n, dtype=np.int64)
    parent = np.array([rng.integers(0, i) for i in range(1, n)], dtype=np.int64)
    return parent, child


def store_columns(heap, part_of: np.ndarray, partitions: int, schema: AttributeSchema, columns: dict) -> list[int]:
    """Store row i of every column under key i, in partition ``part_of[i]``; returns header refs."""
    refs = []
    for p in range(partitions):
        ids = np.flatnonzero(part_of == p)
        payload = np.concatenate(
            [np.ascontiguousarray(columns[name][ids]).view(np.uint8).reshape(len(ids), -1) for name, _ in schema.attributes],
            axis=1,
        ) if len(ids) else np.zeros((0, schema.payload_width), np.uint8)
        refs.append(build_partition(heap, p, schema, (ids.astype(np.int64), payload)))
    return refs


@dataclass
class PageRankGraph:
    n: int
    partitions: int
    routing: RoutingTable
    vertex_parts: list[AttributePartition]
    edge_dst: list[np.ndarray]
    edge_src: list[AddressTable]

    def ranks(self) -> np.ndarray:
        out = np.zeros(self.n)
        for part in self.vertex_parts:
            out[part.keys] = part.column("rank", "<f8")[:, 0]
        return out


def load_pagerank_graph(runner: Runner, n: int, src: np.ndarray, dst: np.ndarray) -> PageRankGraph:
    P = runner.config.partitions
    vp = HashPartitioner(P)
    vertex_part = vp.assign_keys(np.arange(n, dtype=np.int64))
    degree = np.bincount(src, minlength=n).astype(np.int64)
    rank = np.full(n, 1.0 / n)
    refs = store_columns(runner.heap, vertex_part, P, PAGERANK_SCHEMA, {"rank": rank, "degree": degree})
    routing = build_routing_table(runner.heap, refs, PAGERANK_SCHEMA)
    edge_part = vertex_part[src]
    dsts, tables = [], []
    for p in range(P):
        sel = np.flatnonzero(edge_part == p)
        dsts.append(dst[sel].astype(np.int64))
        tables.append(build_address_table(runner.heap, routing, src[sel], vp, PAGERANK_SCHEMA))
    return PageRankGraph(n, P, routing, [routing.partition(p) for p in range(P)], dsts, tables)


def _contributions(payload) -> RecordBatch:
    dst, table = payload
    rank = gather(table, "rank", "<f8")[:, 0]
    degree = gather(table, "degree", "<i8")[:, 0]
    contrib = rank / degree
    return RecordBatch(KeyKind.INT64, dst, contrib.view(np.uint8).reshape(-1, 8))


def _apply_ranks(out, reduce_id, parts, n, damping, dangling):
    part = parts[reduce_id]
    incoming = np.zeros(len(part))
    if out is not None:
        incoming[part.positions(out.keys)] = out.fold(np.add, "<f8")
    new = (1.0 - damping) / n + damping * (incoming + dangling / n)
    part.update_column("rank", new, "<f8")
    return float(new[part.column("degree", "<i8")[:, 0] == 0].sum()), float(new.sum())


def dangling_mass(graph: PageRankGraph) -> float:
    return float(sum(p.column("rank", "<f8")[p.column("degree", "<i8")[:, 0] == 0, 0].sum() for p in graph.vertex_parts))


def pagerank(runner: Runner, graph: PageRankGraph, iterations: int, damping: float = 0.85, on_iteration=None) -> np.ndarray:
    """Damped PageRank; dangling mass is spread uniformly. Ranks are updated in the store."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    dangling = dangling_mass(graph)
    maps = [MapInput((graph.edge_dst[p], graph.edge_src[p]), _contributions) for p in range(graph.partitions)]
    for it in range(iterations):
        finish = partial(_apply_ranks, parts=graph.vertex_parts, n=graph.n, damping=damping, dangling=dangling)
        results = runner.shuffle(maps, Scheme.HASH_MERGE, HashPartitioner(graph.partitions), finish)
        dangling = sum(d for d, _ in results)
        if on_iteration is not None:
            on_iteration(it + 1, sum(s for _, s in results))
    return graph.ranks()


def pagerank_dense(n: int, src: np.ndarray, dst: np.ndarray, iterations: int, damping: float = 0.85, on_iteration=None) -> np.ndarray:
    """Power iteration with an explicit n x n transition matrix."""
    degree = np.bincount(src, minlength=n).astype(float)
    M = np.zeros((n, n))
    np.add.at(M, (dst, src), 1.0 / degree[src])
    dangling = degree == 0
    r = np.full(n, 1.0 / n)
    for it in range(iterations):
        r = (1.0 - damping) / n + damping * (M @ r + r[dangling].sum() / n)
        if on_iteration is not None:
            on_iteration(it + 1, r.sum())
    return r
