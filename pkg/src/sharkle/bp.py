"""Synchronous sum-product belief propagation on pairwise models.

Vertex partitions hold each vertex's belief and unary potential; edge
partitions hold both directed messages of every undirected edge (``fwd``
is u->v, ``bwd`` is v->u for an edge stored as (u, v)). One iteration:

1. edge partitions emit log-messages keyed by destination vertex; a
   hash-merge shuffle sums them per vertex;
2. the reducers recompute beliefs in place and report the largest change;
3. edge partitions read the fresh beliefs of both endpoints and recompute
   their messages. By default the beliefs are read through address tables
   (``mode="gather"``); ``mode="shuffle"`` routes them with a third,
   pass-through shuffle instead. Both produce the same bits.

A new message uses the sender's belief divided by the message it received
over the same edge, which leaves the product of its other inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .checkpoint import SnapshotStore, await_durable, checkpoint_partitions, common_version, restore
from .dataflow import MapInput, Runner
from .errors import NonPositivePotential
from .graph import store_columns
from .shuffle import HashPartitioner, KeyKind, RecordBatch, Scheme
from .store import (
    AddressTable,
    AttributePartition,
    AttributeSchema,
    build_address_table,
    build_partition,
    build_routing_table,
    gather,
)

VERTEX_DATASET, EDGE_DATASET, STATE_DATASET = 0, 1, 2
STATE_SCHEMA = AttributeSchema.of(iteration=8, delta=8)
_EDGE_BITS = 39


def vertex_schema(k: int) -> AttributeSchema:
    return AttributeSchema.of(belief=8 * k, unary=8 * k)


def edge_schema(k: int) -> AttributeSchema:
    return AttributeSchema.of(fwd=8 * k, bwd=8 * k)


@dataclass
class BPModel:
    psi: np.ndarray
    unary: np.ndarray
    damping: float = 0.0

    @property
    def k(self) -> int:
        return self.psi.shape[0]

    def validate(self) -> None:
        if self.psi.ndim != 2 or self.psi.shape[0] != self.psi.shape[1]:
            raise ValueError("pairwise potential must be k x k")
        if self.unary.ndim != 2 or self.unary.shape[1] != self.k:
            raise ValueError("unary potentials must be n x k")
        if not (np.all(self.psi > 0) and np.all(self.unary > 0)):
            raise NonPositivePotential("potentials must be strictly positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must be in [0, 1)")


def random_model(n: int, k: int, seed: int = 0, coupling: float = 1.0) -> BPModel:
    """Symmetric attractive pairwise potential plus random unaries.

    Repulsive potentials make synchronous loopy BP oscillate; on trees any
    positive potential works.
    """
    rng = np.random.default_rng([seed, 31])
    psi = rng.uniform(0.5, 1.0, (k, k))
    psi = (psi + psi.T) / 2 + coupling * np.eye(k)
    return BPModel(psi, rng.uniform(0.1, 1.0, (n, k)))


def normalize(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=1, keepdims=True)


def exact_marginals(n: int, u: np.ndarray, v: np.ndarray, model: BPModel) -> np.ndarray:
    """Marginals by enumerating all k**n joint assignments."""
    k = model.k
    states = np.indices((k,) * n, dtype=np.int8).reshape(n, -1)
    logp = np.zeros(states.shape[1])
    for i in range(n):
        logp += np.log(model.unary[i])[states[i]]
    lpsi = np.log(model.psi)
    for a, b in zip(u.tolist(), v.tolist()):
        logp += lpsi[states[a], states[b]]
    p = np.exp(logp - logp.max())
    p /= p.sum()
    return np.stack([np.bincount(states[i], weights=p, minlength=k) for i in range(n)])


def new_messages(bu, bv, fwd, bwd, psi, damping=0.0):
    """Messages u->v and v->u from endpoint beliefs and the previous messages."""
    nf = normalize((bu / bwd) @ psi)
    nb = normalize((bv / fwd) @ psi.T)
    if damping:
        nf = normalize((1.0 - damping) * nf + damping * fwd)
        nb = normalize((1.0 - damping) * nb + damping * bwd)
    return nf, nb


def edge_tag(edge_part, edge_id, side):
    """Shuffle key routing one endpoint belief to an edge partition."""
    return (np.asarray(edge_part, np.int64) << (_EDGE_BITS + 1)) | (np.asarray(edge_id, np.int64) << 1) | side


class EdgeEndPartitioner:
    """Sends an :func:`edge_tag` key to the edge partition encoded in its top bits."""

    def __init__(self, num_partitions: int):
        self.num_partitions = num_partitions

    def assign(self, batch: RecordBatch) -> np.ndarray:
        return self.assign_keys(batch.keys)

    def assign_keys(self, keys, kind=KeyKind.INT64) -> np.ndarray:
        return np.asarray(keys, np.int64) >> (_EDGE_BITS + 1)

    def partition(self, key) -> int:
        return int(key) >> (_EDGE_BITS + 1)


@dataclass
class BPGraph:
    n: int
    k: int
    partitions: int
    u: np.ndarray
    v: np.ndarray
    vertex_parts: list[AttributePartition]
    edge_parts: list[AttributePartition]
    state: AttributePartition
    edge_u: list[np.ndarray] = field(default_factory=list)
    edge_v: list[np.ndarray] = field(default_factory=list)
    addr_u: list[AddressTable] = field(default_factory=list)
    addr_v: list[AddressTable] = field(default_factory=list)
    incidence: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def iteration(self) -> int:
        return int(self.state.column("iteration", "<i8")[0, 0])

    def beliefs(self) -> np.ndarray:
        out = np.zeros((self.n, self.k))
        for part in self.vertex_parts:
            out[part.keys] = part.column("belief", "<f8")
        return out

    def messages(self) -> tuple[np.ndarray, np.ndarray]:
        fwd = np.zeros((len(self.u), self.k))
        bwd = np.zeros_like(fwd)
        for part in self.edge_parts:
            fwd[part.keys] = part.column("fwd", "<f8")
            bwd[part.keys] = part.column("bwd", "<f8")
        return fwd, bwd


def _placement(n: int, u: np.ndarray, P: int) -> tuple[np.ndarray, np.ndarray]:
    vertex_part = HashPartitioner(P).assign_keys(np.arange(n, dtype=np.int64))
    # edges live with their first endpoint
    return vertex_part, vertex_part[u] if len(u) else np.zeros(0, np.int64)


def _wire(runner: Runner, graph: BPGraph) -> BPGraph:
    """Address tables and incidence lists derived from the stored partitions."""
    P = graph.partitions
    vertex_part, edge_part = _placement(graph.n, graph.u, P)
    vp = HashPartitioner(P)
    routing = build_routing_table(runner.heap, [p.ref for p in graph.vertex_parts], vertex_schema(graph.k))
    schema = vertex_schema(graph.k)
    for part in graph.edge_parts:
        eids = part.keys
        eu, ev = graph.u[eids], graph.v[eids]
        graph.edge_u.append(eu)
        graph.edge_v.append(ev)
        graph.addr_u.append(build_address_table(runner.heap, routing, eu, vp, schema))
        graph.addr_v.append(build_address_table(runner.heap, routing, ev, vp, schema))
    eids = np.arange(len(graph.u), dtype=np.int64)
    for q, part in enumerate(graph.vertex_parts):
        s0 = np.flatnonzero(vertex_part[graph.u] == q) if len(graph.u) else eids
        s1 = np.flatnonzero(vertex_part[graph.v] == q) if len(graph.u) else eids
        keys = np.concatenate([edge_tag(edge_part[s0], s0, 0), edge_tag(edge_part[s1], s1, 1)])
        pos = part.positions(np.concatenate([graph.u[s0], graph.v[s1]]))
        graph.incidence.append((keys, pos))
    return graph


def _state_partition(heap, iteration: int = 0, delta: float = np.inf) -> int:
    payload = np.array([iteration], "<i8").view(np.uint8).tolist() + np.array([delta], "<f8").view(np.uint8).tolist()
    return build_partition(heap, 0, STATE_SCHEMA, (np.zeros(1, np.int64), np.array([payload], np.uint8)))


def load_bp(runner: Runner, n: int, u: np.ndarray, v: np.ndarray, model: BPModel) -> BPGraph:
    """Store a fresh model: uniform beliefs and messages."""
    model.validate()
    if model.unary.shape[0] != n:
        raise ValueError("unary potentials do not match the vertex count")
    k, P = model.k, runner.config.partitions
    u = np.asarray(u, np.int64)
    v = np.asarray(v, np.int64)
    vertex_part, edge_part = _placement(n, u, P)
    vrefs = store_columns(runner.heap, vertex_part, P, vertex_schema(k), {"belief": np.full((n, k), 1.0 / k), "unary": model.unary})
    uniform = np.full((len(u), k), 1.0 / k)
    erefs = store_columns(runner.heap, edge_part, P, edge_schema(k), {"fwd": uniform, "bwd": uniform})
    vparts = [AttributePartition(runner.pool, r, vertex_schema(k)) for r in vrefs]
    eparts = [AttributePartition(runner.pool, r, edge_schema(k)) for r in erefs]
    state = AttributePartition(runner.pool, _state_partition(runner.heap), STATE_SCHEMA)
    return _wire(runner, BPGraph(n, k, P, u, v, vparts, eparts, state))


def restore_bp(runner: Runner, store: SnapshotStore, n: int, u: np.ndarray, v: np.ndarray, model: BPModel) -> tuple[BPGraph, int]:
    """Rebuild a run from the newest snapshot shared by beliefs, messages and driver state."""
    model.validate()
    version = common_version(store, [VERTEX_DATASET, EDGE_DATASET, STATE_DATASET])
    vparts, _, _ = restore(store, runner.pool, runner.heap, vertex_schema(model.k), VERTEX_DATASET, version)
    eparts, _, _ = restore(store, runner.pool, runner.heap, edge_schema(model.k), EDGE_DATASET, version)
    (state,), _, _ = restore(store, runner.pool, runner.heap, STATE_SCHEMA, STATE_DATASET, version)
    if len(vparts) != runner.config.partitions:
        raise ValueError(f"snapshot has {len(vparts)} partitions, job has {runner.config.partitions}")
    graph = BPGraph(n, model.k, len(vparts), np.asarray(u, np.int64), np.asarray(v, np.int64), vparts, eparts, state)
    return _wire(runner, graph), version


# ---------------------------------------------------------------------------
# stage bodies (module level so worker processes can unpickle them)


def _emit_messages(payload) -> RecordBatch:
    part, eu, ev = payload
    keys = np.concatenate([ev, eu])
    logm = np.log(np.concatenate([part.column("fwd", "<f8"), part.column("bwd", "<f8")]))
    return RecordBatch(KeyKind.INT64, keys, logm.view(np.uint8).reshape(len(keys), part.schema.widths[0]))


def _update_beliefs(out, reduce_id, parts, k):
    part = parts[reduce_id]
    logm = np.zeros((len(part), k))
    if out is not None:
        logm[part.positions(out.keys)] = out.fold(np.add, "<f8").reshape(-1, k)
    logb = np.log(part.column("unary", "<f8")) + logm
    b = normalize(np.exp(logb - logb.max(axis=1, keepdims=True))) if len(part) else logb
    old = part.column("belief", "<f8")
    delta = float(np.abs(b - old).max()) if len(part) else 0.0
    part.update_column("belief", b, "<f8")
    return delta


def _write_messages(part: AttributePartition, bu, bv, psi, damping) -> None:
    if not len(part):
        return
    nf, nb = new_messages(bu, bv, part.column("fwd", "<f8"), part.column("bwd", "<f8"), psi, damping)
    part.update_column("fwd", nf, "<f8")
    part.update_column("bwd", nb, "<f8")


def _refresh_gather(task) -> None:
    part, addr_u, addr_v, psi, damping = task
    _write_messages(part, gather(addr_u, "belief", "<f8"), gather(addr_v, "belief", "<f8"), psi, damping)


def _emit_beliefs(payload) -> RecordBatch:
    part, keys, pos = payload
    b = np.ascontiguousarray(part.column("belief", "<f8")[pos])
    return RecordBatch(KeyKind.INT64, keys, b.view(np.uint8).reshape(len(keys), part.schema.widths[0]))


def _refresh_shuffled(out, reduce_id, parts, k, psi, damping):
    part = parts[reduce_id]
    if out is None:
        return
    eids = part.keys
    edge = (out.keys >> 1) & ((1 << _EDGE_BITS) - 1)
    side = (out.keys & 1).astype(bool)
    vals = np.ascontiguousarray(out.values).view("<f8").reshape(-1, k)
    bu = np.empty((len(part), k))
    bv = np.empty((len(part), k))
    bu[np.searchsorted(eids, edge[~side])] = vals[~side]
    bv[np.searchsorted(eids, edge[side])] = vals[side]
    _write_messages(part, bu, bv, psi, damping)


# ---------------------------------------------------------------------------
# driver


@dataclass
class BPResult:
    beliefs: np.ndarray
    iterations: int
    deltas: list[float]
    converged: bool
    versions: list[int] = field(default_factory=list)


def aggregate_and_update(runner: Runner, graph: BPGraph) -> float:
    """Stages 1 and 2; returns the largest belief change."""
    maps = [MapInput((graph.edge_parts[p], graph.edge_u[p], graph.edge_v[p]), _emit_messages) for p in range(graph.partitions)]
    finish = partial(_update_beliefs, parts=graph.vertex_parts, k=graph.k)
    return max(runner.shuffle(maps, Scheme.HASH_MERGE, HashPartitioner(graph.partitions), finish))


def refresh_messages(runner: Runner, graph: BPGraph, model: BPModel, mode: str = "gather") -> None:
    """Stage 3: recompute every message from the updated beliefs."""
    if mode == "gather":
        tasks = [(graph.edge_parts[p], graph.addr_u[p], graph.addr_v[p], model.psi, model.damping) for p in range(graph.partitions)]
        runner.run_stage(_refresh_gather, tasks)
    elif mode == "shuffle":
        maps = [MapInput((graph.vertex_parts[q], *graph.incidence[q]), _emit_beliefs) for q in range(graph.partitions)]
        finish = partial(_refresh_shuffled, parts=graph.edge_parts, k=graph.k, psi=model.psi, damping=model.damping)
        runner.shuffle(maps, Scheme.PASS_THROUGH, EdgeEndPartitioner(graph.partitions), finish)
    else:
        raise ValueError(f"unknown stage-3 mode {mode!r}")


def checkpoint_graph(store: SnapshotStore, graph: BPGraph) -> int:
    version = checkpoint_partitions(graph.vertex_parts, store, VERTEX_DATASET)
    checkpoint_partitions(graph.edge_parts, store, EDGE_DATASET)
    checkpoint_partitions([graph.state], store, STATE_DATASET)
    return version


def await_graph(store: SnapshotStore, version: int) -> None:
    for d in (VERTEX_DATASET, EDGE_DATASET, STATE_DATASET):
        await_durable(store, version, d)


def belief_propagation(
    runner: Runner,
    graph: BPGraph,
    model: BPModel,
    max_iter: int,
    tol: float,
    mode: str = "gather",
    store: SnapshotStore | None = None,
    checkpoint_every: int = 0,
    on_iteration=None,
) -> BPResult:
    """Iterate until the largest belief change drops below ``tol`` or ``max_iter`` is reached.

    Continues from the iteration recorded in ``graph.state`` (non-zero after
    :func:`restore_bp`). With a store and ``checkpoint_every > 0`` the
    beliefs, messages and iteration counter are snapshotted at the end of
    every ``checkpoint_every``-th iteration.
    """
    model.validate()
    if tol <= 0:
        raise ValueError("tol must be positive")
    deltas, versions = [], []
    converged = False
    it = graph.iteration
    while it < max_iter and not converged:
        it += 1
        delta = aggregate_and_update(runner, graph)
        deltas.append(delta)
        converged = delta < tol
        if not converged:
            refresh_messages(runner, graph, model, mode)
        graph.state.update_column("iteration", np.array([it]), "<i8")
        graph.state.update_column("delta", np.array([delta]), "<f8")
        if store is not None and checkpoint_every > 0 and it % checkpoint_every == 0:
            versions.append(checkpoint_graph(store, graph))
        if on_iteration is not None:
            on_iteration(it, delta)
    if store is not None and versions:
        await_graph(store, versions[-1])
    return BPResult(graph.beliefs(), it, deltas, converged, versions)
