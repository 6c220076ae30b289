"""Directed shard graphs, their per-class refinement, and retrain-set queries.

A node ``i`` owns a disjoint set of sample ids. An edge ``i -> j`` lets node
``i``'s adapters train on node ``j``'s data. Self-edges are implicit and never
stored. Refined nodes are keyed ``(parent, label)``; their outbound
neighborhood is every refined node of every parent in ``N(parent)``, so
neighborhoods and retrain sets are computed on the parent graph directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from shardsafe import seeding
from shardsafe.embedding_store import EmbeddingDataset
from shardsafe.errors import GraphError, UnknownIdError

TOPOLOGIES = ("uniform", "bilevel", "random_degree", "cliques", "custom")

NodeKey = tuple  # (parent index, class label)


@dataclass(frozen=True, eq=False)
class ShardGraph:
    nodes: tuple  # tuple of sorted uint64 arrays
    edges: frozenset  # {(i, j)}, i != j
    topology: str = "custom"
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        nodes = tuple(np.sort(np.asarray(s, dtype=np.uint64)) for s in self.nodes)
        for s in nodes:
            s.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def out_neighbors(self) -> tuple:
        """``N(i)`` including ``i`` itself, as sorted tuples."""
        out = [{i} for i in range(len(self.nodes))]
        for i, j in self.edges:
            out[i].add(j)
        return tuple(tuple(sorted(s)) for s in out)

    @cached_property
    def in_neighbors(self) -> tuple:
        inn = [{i} for i in range(len(self.nodes))]
        for i, j in self.edges:
            inn[j].add(i)
        return tuple(tuple(sorted(s)) for s in inn)

    @cached_property
    def owner(self) -> dict:
        return {int(x): i for i, s in enumerate(self.nodes) for x in s.tolist()}

    def node_of(self, sample_id: int) -> int:
        try:
            return self.owner[int(sample_id)]
        except KeyError:
            raise UnknownIdError(f"sample id {int(sample_id)} is not in any shard") from None

    def without_samples(self, ids: Iterable[int]) -> "ShardGraph":
        """Same topology with ``ids`` removed; emptied nodes keep their index."""
        drop = np.asarray(sorted({int(i) for i in ids}), dtype=np.uint64)
        nodes = tuple(s[~np.isin(s, drop)] for s in self.nodes)
        return ShardGraph(nodes, self.edges, self.topology, self.metadata)

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "topology": self.topology,
            "metadata": self.metadata,
            "nodes": [{"id": i, "samples": s.tolist()} for i, s in enumerate(self.nodes)],
            "edges": sorted([list(e) for e in self.edges]),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "ShardGraph":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphError(f"graph JSON does not parse: {exc}") from None
        if doc.get("version") != 1:
            raise GraphError(f"unsupported graph version {doc.get('version')!r}")
        nodes = sorted(doc["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise GraphError("node ids must be 0..n-1")
        raw_edges = [tuple(e) for e in doc.get("edges", [])]
        graph = cls(
            tuple(np.asarray(n["samples"], dtype=np.uint64) for n in nodes),
            frozenset(raw_edges),
            doc.get("topology", "custom"),
            doc.get("metadata", {}),
        )
        problems = validate(graph)
        if len(raw_edges) != len(set(raw_edges)):
            problems.append("duplicate edges in edge list")
        if problems:
            raise GraphError("; ".join(problems))
        return graph

    def equals(self, other: "ShardGraph") -> bool:
        return self.to_json() == other.to_json()


def save_graph(graph: ShardGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(graph.to_json())


def load_graph(path) -> ShardGraph:
    with open(path) as fh:
        return ShardGraph.from_json(fh.read())


def validate(graph: ShardGraph, dataset: EmbeddingDataset | None = None) -> list:
    """Every violated invariant as a message; an empty list means ok."""
    problems = []
    n = len(graph.nodes)
    seen: dict = {}
    for i, s in enumerate(graph.nodes):
        if s.shape[0] > 1 and (s[1:] == s[:-1]).any():
            problems.append(f"node {i} lists a sample twice")
        for x in s.tolist():
            if x in seen and seen[x] != i:
                problems.append(f"sample {x} shared by nodes {seen[x]} and {i}")
            seen[x] = i
    for i, j in sorted(graph.edges):
        if not (0 <= i < n and 0 <= j < n):
            problems.append(f"edge ({i}, {j}) has an endpoint outside 0..{n - 1}")
        elif i == j:
            problems.append(f"edge ({i}, {i}) is an explicit self-loop")
    if graph.topology not in TOPOLOGIES:
        problems.append(f"unknown topology {graph.topology!r}")
    if dataset is not None:
        missing = set(seen) - {int(x) for x in dataset.ids.tolist()}
        if missing:
            problems.append(f"sample {min(missing)} not in dataset")
        unassigned = len(dataset) - len(seen)
        if unassigned > 0:
            problems.append(f"{unassigned} dataset samples belong to no shard")
    return problems


def _even_chunks(items: np.ndarray, n: int) -> list:
    return [np.asarray(c) for c in np.array_split(items, n)]


def build_uniform(dataset: EmbeddingDataset, n: int, seed: int) -> ShardGraph:
    if n < 1 or n > len(dataset):
        raise GraphError(f"cannot split {len(dataset)} samples into {n} shards")
    perm = seeding.rng(seed, "shard_graph", "uniform").permutation(dataset.ids)
    return ShardGraph(tuple(_even_chunks(perm, n)), frozenset(), "uniform", {"n": n, "seed": seed})


def build_random_degree(dataset: EmbeddingDataset, n: int, d: int, seed: int) -> ShardGraph:
    if d < 0 or d >= n:
        raise GraphError(f"degree {d} needs at least {d + 1} nodes, got {n}")
    base = build_uniform(dataset, n, seed)
    r = seeding.rng(seed, "shard_graph", "random_degree")
    edges = set()
    for i in range(n):
        others = np.delete(np.arange(n), i)
        for j in r.choice(others, size=d, replace=False).tolist():
            edges.add((i, j))
    meta = {"n": n, "d": d, "seed": seed}
    return ShardGraph(base.nodes, frozenset(edges), "random_degree", meta)


def build_disjoint_cliques(dataset: EmbeddingDataset, n: int, d: int, seed: int) -> ShardGraph:
    """Uniform shards grouped (in index order) into fully connected groups of ``d``."""
    if d < 1 or n % d:
        raise GraphError(f"{n} nodes do not split into cliques of {d}")
    base = build_uniform(dataset, n, seed)
    edges = {(i, j) for c in range(0, n, d) for i in range(c, c + d) for j in range(c, c + d) if i != j}
    return ShardGraph(base.nodes, frozenset(edges), "cliques", {"n": n, "d": d, "seed": seed})


@dataclass(frozen=True)
class CliqueLayout:
    n_c: int
    n_f: int
    class_to_clique: tuple  # per coarse shard: tuple mapping class -> fine index
    sample_to_coarse: Mapping

    @property
    def n(self) -> int:
        return self.n_c * self.n_f


def bilevel_layout(dataset: EmbeddingDataset, n_c: int, n_f: int, seed: int) -> CliqueLayout:
    K = dataset.num_classes
    if n_c < 1:
        raise GraphError("n_c must be >= 1")
    if not 1 <= n_f <= K:
        raise GraphError(f"n_f={n_f} must lie in 1..{K}")
    coarse_of: dict = {}
    cursor = 0
    for k in range(K):
        members = dataset.ids[dataset.labels == k]
        members = seeding.rng(seed, "shard_graph", "bilevel", "coarse", k).permutation(members)
        # the cursor carries across classes so coarse sizes stay within one of each other
        for x in members.tolist():
            coarse_of[int(x)] = cursor % n_c
            cursor += 1
    cliques = []
    for c in range(n_c):
        order = seeding.rng(seed, "shard_graph", "bilevel", "fine", c).permutation(K)
        mapping = [0] * K
        for f, chunk in enumerate(_even_chunks(order, n_f)):
            for k in chunk.tolist():
                mapping[k] = f
        cliques.append(tuple(mapping))
    return CliqueLayout(n_c, n_f, tuple(cliques), coarse_of)


def build_bilevel(dataset: EmbeddingDataset, n_c: int, n_f: int, seed: int) -> ShardGraph:
    """Coarse class-balanced split, then per-coarse-shard class cliques.

    Node ``c * n_f + f`` holds the samples of coarse shard ``c`` whose class
    falls in fine clique ``f``. Each node's refined children are mutually
    connected through the node's implicit self-edge, so the refined graph is a
    disjoint union of class cliques and the parent graph needs no edges.
    """
    layout = bilevel_layout(dataset, n_c, n_f, seed)
    buckets = [[] for _ in range(layout.n)]
    for x, k in zip(dataset.ids.tolist(), dataset.labels.tolist()):
        c = layout.sample_to_coarse[x]
        buckets[c * n_f + layout.class_to_clique[c][k]].append(x)
    meta = {"n_c": n_c, "n_f": n_f, "d": -(-dataset.num_classes // n_f), "seed": seed}
    return ShardGraph(tuple(buckets), frozenset(), "bilevel", meta)


@dataclass(frozen=True)
class RefinedNode:
    parent: int
    label: int
    samples: np.ndarray

    @property
    def key(self) -> NodeKey:
        return (self.parent, self.label)


@dataclass(frozen=True, eq=False)
class RefinedShardGraph:
    parent: ShardGraph
    nodes: tuple  # RefinedNode, sorted by (parent, label)

    @cached_property
    def index(self) -> dict:
        return {n.key: i for i, n in enumerate(self.nodes)}

    @cached_property
    def by_parent(self) -> tuple:
        out = [[] for _ in range(len(self.parent))]
        for n in self.nodes:
            out[n.parent].append(n.key)
        return tuple(tuple(x) for x in out)

    @property
    def keys(self) -> list:
        return [n.key for n in self.nodes]

    def node(self, key: NodeKey) -> RefinedNode:
        try:
            return self.nodes[self.index[tuple(key)]]
        except KeyError:
            raise GraphError(f"no refined node {tuple(key)}") from None

    def out_keys(self, key: NodeKey) -> list:
        """Outbound refined neighbors of ``key`` (itself included)."""
        parent = self.node(key).parent
        return [k for p in self.parent.out_neighbors[parent] for k in self.by_parent[p]]

    def in_keys(self, key: NodeKey) -> list:
        parent = self.node(key).parent
        return [k for p in self.parent.in_neighbors[parent] for k in self.by_parent[p]]

    @property
    def edges(self) -> frozenset:
        """Materialized E' over refined indices, refined self-edges included."""
        ix = self.index
        return frozenset(
            (ix[a], ix[b]) for a in self.keys for b in self.out_keys(a)
        )

    def parent_samples(self, parents: Iterable[int]) -> np.ndarray:
        parts = [self.parent.nodes[p] for p in sorted(set(parents))]
        if not parts:
            return np.empty(0, dtype=np.uint64)
        return np.sort(np.concatenate(parts))


def refine(graph: ShardGraph, dataset: EmbeddingDataset) -> RefinedShardGraph:
    nodes = []
    for p, samples in enumerate(graph.nodes):
        if samples.shape[0] == 0:
            continue
        labels = dataset.labels[dataset.positions(samples.tolist())]
        for k in np.unique(labels).tolist():
            nodes.append(RefinedNode(p, int(k), samples[labels == k]))
    return RefinedShardGraph(graph, tuple(nodes))


def neighborhood_union(refined: RefinedShardGraph, key: NodeKey) -> np.ndarray:
    """Sorted sample ids of every shard in the outbound neighborhood of ``key``."""
    parent = refined.node(key).parent
    return refined.parent_samples(refined.parent.out_neighbors[parent])


def affected_parents(graph: ShardGraph, sample_ids: Iterable[int]) -> list:
    """Parents whose adapters read any of ``sample_ids`` (the inbound set)."""
    out = set()
    for x in sample_ids:
        out.update(graph.in_neighbors[graph.node_of(x)])
    return sorted(out)


def retrain_set(refined: RefinedShardGraph, sample_id: int):
    """Return ``(M_x, affected refined keys)`` for forgetting ``sample_id``.

    ``M_x`` is the union of the neighborhoods of every refined node pointing
    at the node holding ``sample_id``; the sample itself is still included.
    """
    graph = refined.parent
    # emptied parents own no adapter, so they read nothing
    parents = [p for p in affected_parents(graph, [sample_id]) if refined.by_parent[p]]
    keys = [k for p in parents for k in refined.by_parent[p]]
    reach = {q for p in parents for q in graph.out_neighbors[p]}
    return set(refined.parent_samples(reach).tolist()), keys
