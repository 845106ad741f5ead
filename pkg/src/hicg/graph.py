"""Per-session heterogeneous item graphs and the batch-level union graph used
to draw contrastive item pairs."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ConfigError
from .data import Behavior, Session

IN, OUT = 0, 1


def _behaviors(session) -> Sequence[Behavior]:
    return session.behaviors if isinstance(session, Session) else session


@dataclass
class HeteroSessionGraph:
    """Directed multi-relational graph over the unique items of a session.

    Relation ``(u, v)`` labels a transition from a type-``u`` behavior to a
    type-``v`` behavior; its flat id is ``u * n_types + v``.
    """

    nodes: list[int]
    n_types: int
    behavior_to_node: list[int]
    behavior_types: list[int]
    edges: dict[tuple[int, int, tuple[int, int]], int] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_relations(self) -> int:
        return self.n_types * self.n_types

    def relation_id(self, relation: tuple[int, int]) -> int:
        return relation[0] * self.n_types + relation[1]

    @property
    def relations(self) -> set[tuple[int, int]]:
        return {r for (_, _, r) in self.edges}

    def edge_weight(self, src: int, dst: int, relation: tuple[int, int], direction: int = OUT) -> float:
        """Normalised weight of item edge ``src -> dst``; arguments are item ids."""
        i, j = self.nodes.index(src), self.nodes.index(dst)
        a = self.adjacency(relation, direction)
        return float(a[i, j] if direction == OUT else a[j, i])

    def adjacency(self, relation: tuple[int, int], direction: int) -> np.ndarray:
        """Row-normalised adjacency for one relation.

        OUT rows index the source node; IN rows index the destination node, so
        ``A_in @ H`` aggregates predecessors.
        """
        n = self.n_nodes
        a = np.zeros((n, n))
        for (i, j, r), m in self.edges.items():
            if r != relation:
                continue
            if direction == OUT:
                a[i, j] += m
            else:
                a[j, i] += m
        rows = a.sum(axis=1, keepdims=True)
        np.divide(a, rows, out=a, where=rows > 0)
        return a

    def adjacency_tensor(self) -> np.ndarray:
        """All adjacencies stacked as ``(n_relations, 2, N, N)``."""
        n = self.n_nodes
        counts = np.zeros((self.n_relations, 2, n, n))
        for (i, j, r), m in self.edges.items():
            k = self.relation_id(r)
            counts[k, OUT, i, j] += m
            counts[k, IN, j, i] += m
        rows = counts.sum(axis=3, keepdims=True)
        np.divide(counts, rows, out=counts, where=rows > 0)
        return counts

    def edge_list_text(self) -> str:
        """Debug dump: ``src<TAB>dst<TAB>src_type<TAB>dst_type<TAB>weight``."""
        lines = []
        for (i, j, r) in sorted(self.edges, key=lambda e: (e[2], e[0], e[1])):
            w = self.adjacency(r, OUT)[i, j]
            lines.append(f"{self.nodes[i]}\t{self.nodes[j]}\t{r[0]}\t{r[1]}\t{w:.6g}\n")
        return "".join(lines)


def build_session_graph(session, n_types: int | None = None) -> HeteroSessionGraph:
    bs = _behaviors(session)
    if n_types is None:
        n_types = max((b.btype for b in bs), default=0) + 1
    nodes: list[int] = []
    where: dict[int, int] = {}
    to_node = []
    for b in bs:
        if b.item not in where:
            where[b.item] = len(nodes)
            nodes.append(b.item)
        to_node.append(where[b.item])
    edges: dict = defaultdict(int)
    for t in range(len(bs) - 1):
        edges[(to_node[t], to_node[t + 1], (bs[t].btype, bs[t + 1].btype))] += 1
    return HeteroSessionGraph(nodes, n_types, to_node, [b.btype for b in bs], dict(edges))


# --------------------------------------------------------------------------
# Union graph


class UnionFind:
    """Disjoint-set forest over arbitrary hashable keys (union by size,
    path halving)."""

    def __init__(self, keys: Iterable = ()):
        self.parent: dict = {}
        self.size: dict = {}
        for k in keys:
            self.add(k)

    def add(self, key) -> None:
        if key not in self.parent:
            self.parent[key] = key
            self.size[key] = 1

    def find(self, key):
        parent = self.parent
        while parent[key] != key:
            parent[key] = parent[parent[key]]
            key = parent[key]
        return key

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def groups(self) -> list[list]:
        out = defaultdict(list)
        for k in self.parent:
            out[self.find(k)].append(k)
        return list(out.values())


@dataclass
class UnionGraph:
    nodes: list[int]
    edges: set[tuple[int, int]]
    component_id: dict[int, int] = field(default_factory=dict)


@dataclass
class ComponentPartition:
    components: list[frozenset]
    batch_nodes: frozenset

    @property
    def labels(self) -> list[int]:
        return [min(c) for c in self.components]


def connected_components(g: UnionGraph) -> ComponentPartition:
    """Undirected components, labelled and ordered by their smallest item."""
    uf = UnionFind(g.nodes)
    for a, b in g.edges:
        uf.add(a)
        uf.add(b)
        uf.union(a, b)
    comps = sorted((frozenset(c) for c in uf.groups()), key=min)
    g.component_id = {x: min(c) for c in comps for x in c}
    return ComponentPartition(comps, frozenset(uf.parent))


def build_union_graph(sessions: Iterable) -> UnionGraph:
    """Merge the type-erased, undirected transition edges of every session."""
    nodes: dict[int, None] = {}
    edges = set()
    for s in sessions:
        items = [b.item for b in _behaviors(s)]
        for x in items:
            nodes.setdefault(x)
        for a, b in zip(items, items[1:]):
            if a != b:
                edges.add((min(a, b), max(a, b)))
    g = UnionGraph(sorted(nodes), edges)
    connected_components(g)
    return g


# --------------------------------------------------------------------------
# Contrastive pairs


@dataclass(frozen=True)
class CLEntry:
    anchor: int
    positive: int
    negatives: tuple[int, ...]
    component: int
    component_size: int


@dataclass
class CLBatch:
    entries: list[CLEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def negative_count(beta: float, complement_size: int) -> int:
    # guard against 0.1 * 30 = 3.0000000000000004
    return max(1, math.ceil(beta * complement_size - 1e-9))


def sample_cl_pairs(partition: ComponentPartition, beta: float, rng: np.random.Generator) -> CLBatch:
    """One positive per anchor item, plus a negative set shared by the whole
    component and drawn without replacement from the rest of the batch."""
    if not 0 < beta <= 1:
        raise ConfigError(f"beta must be in (0, 1], got {beta}")
    all_nodes = sorted(partition.batch_nodes)
    batch = CLBatch()
    for comp in partition.components:
        if len(comp) < 2:
            continue
        complement = [x for x in all_nodes if x not in comp]
        if not complement:
            continue
        members = sorted(comp)
        k = negative_count(beta, len(complement))
        negatives = tuple(int(x) for x in rng.choice(complement, size=k, replace=False))
        label = members[0]
        for x in members:
            others = [y for y in members if y != x]
            y = others[int(rng.integers(len(others)))]
            batch.entries.append(CLEntry(x, y, negatives, label, len(comp)))
    return batch
