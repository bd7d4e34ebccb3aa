"""Network topology, similarity-weighted spanning trees and tree algebra.

Nodes are 0-based integers. Every edge is stored oriented as ``(s, e)`` with
``s < e``; this orientation fixes the sign convention of the incidence matrix
(``+1`` at the start node, ``-1`` at the end node).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, TopologyError

Edge = tuple[int, int]
EdgeWeights = dict[Edge, float]


def _normalize_edges(node_count: int, edges: Iterable[Sequence[int]]) -> tuple[Edge, ...]:
    seen = set()
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise TopologyError(f"self-loop on node {i}")
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise TopologyError(f"edge ({i}, {j}) references a node outside 0..{node_count - 1}")
        edge = (i, j) if i < j else (j, i)
        if edge in seen:
            raise TopologyError(f"duplicate edge {edge}")
        seen.add(edge)
    return tuple(sorted(seen))


class UnionFind:
    """Disjoint-set forest with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


def connected_components(node_count: int, edges: Iterable[Edge]) -> list[int]:
    """Component label per node; labels are the smallest node id in each component."""
    uf = UnionFind(node_count)
    for i, j in edges:
        uf.union(i, j)
    roots = [uf.find(i) for i in range(node_count)]
    smallest: dict[int, int] = {}
    for i, r in enumerate(roots):
        smallest.setdefault(r, i)
    return [smallest[r] for r in roots]


def is_connected(node_count: int, edges: Iterable[Edge]) -> bool:
    if node_count <= 1:
        return True
    return len(set(connected_components(node_count, edges))) == 1


@dataclass(frozen=True)
class EdgeSupport:
    """Oriented edge set over ``node_count`` nodes.

    This is the set of edges carrying fusion penalties (a spanning tree, or the
    whole network for the pairwise baseline) and, equally, the set of links
    along which the solver exchanges messages.
    """

    node_count: int
    edges: tuple[Edge, ...]

    def __post_init__(self):
        if self.node_count < 1:
            raise TopologyError("a support needs at least one node")
        object.__setattr__(self, "edges", _normalize_edges(self.node_count, self.edges))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def starts(self) -> np.ndarray:
        return np.array([s for s, _ in self.edges], dtype=np.intp)

    @cached_property
    def ends(self) -> np.ndarray:
        return np.array([e for _, e in self.edges], dtype=np.intp)

    @cached_property
    def degree(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.intp)
        np.add.at(deg, self.starts, 1)
        np.add.at(deg, self.ends, 1)
        return deg

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for s, e in self.edges:
            nbrs[s].append(e)
            nbrs[e].append(s)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def edge_index(self) -> dict[Edge, int]:
        return {edge: l for l, edge in enumerate(self.edges)}

    @cached_property
    def half_edges(self) -> "HalfEdges":
        return HalfEdges.from_support(self)

    def is_connected(self) -> bool:
        return is_connected(self.node_count, self.edges)


@dataclass(frozen=True)
class HalfEdges:
    """Node-local view of a support: one record per (owner, neighbor) pair.

    Records are sorted by ``(owner, other)``, which is also the order in which a
    node's inbox is delivered. ``sign`` is the incidence entry ``[H]_{l,owner}``.
    """

    owner: np.ndarray
    other: np.ndarray
    edge: np.ndarray
    sign: np.ndarray
    # half-edge index of the same edge seen from the other endpoint
    twin: np.ndarray

    @classmethod
    def from_support(cls, support: EdgeSupport) -> "HalfEdges":
        records = []
        for l, (s, e) in enumerate(support.edges):
            records.append((s, e, l, 1.0))
            records.append((e, s, l, -1.0))
        records.sort(key=lambda r: (r[0], r[1]))
        owner = np.array([r[0] for r in records], dtype=np.intp)
        other = np.array([r[1] for r in records], dtype=np.intp)
        edge = np.array([r[2] for r in records], dtype=np.intp)
        sign = np.array([r[3] for r in records], dtype=float)
        position = {(int(o), int(t)): h for h, (o, t) in enumerate(zip(owner, other))}
        twin = np.array([position[(int(t), int(o))] for o, t in zip(owner, other)], dtype=np.intp)
        return cls(owner, other, edge, sign, twin)

    def __len__(self) -> int:
        return len(self.owner)


@dataclass(frozen=True)
class NetworkGraph(EdgeSupport):
    """Undirected connected communication network."""

    positions: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        super().__post_init__()
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            if pos.shape != (self.node_count, 2):
                raise ConfigurationError(f"positions must have shape ({self.node_count}, 2), got {pos.shape}")
            object.__setattr__(self, "positions", pos)
        if not self.is_connected():
            raise TopologyError("network graph is not connected")

    def as_support(self) -> EdgeSupport:
        return EdgeSupport(self.node_count, self.edges)


@dataclass(frozen=True)
class SpanningTree(EdgeSupport):
    """Spanning tree with edges listed in ``(s, e)`` order."""

    def __post_init__(self):
        super().__post_init__()
        if self.edge_count != self.node_count - 1:
            raise TopologyError(f"a spanning tree on {self.node_count} nodes needs {self.node_count - 1} edges, "
                                f"got {self.edge_count}")
        if not self.is_connected():
            raise TopologyError("edge set is not spanning (contains a cycle or misses a node)")


def similarity_weights(graph: NetworkGraph, ols: Sequence[np.ndarray]) -> EdgeWeights:
    """Euclidean distance between the local OLS estimates of every adjacent pair.

    Non-adjacent pairs get no entry (their weight is implicitly infinite).
    """
    if len(ols) != graph.node_count:
        raise ConfigurationError(f"expected {graph.node_count} estimates, got {len(ols)}")
    coefs = [np.asarray(getattr(b, "coefficients", b), dtype=float).ravel() for b in ols]
    dims = {c.shape[0] for c in coefs}
    if len(dims) != 1:
        raise ConfigurationError(f"estimates have mixed dimensions {sorted(dims)}")
    return {(i, j): float(np.linalg.norm(coefs[i] - coefs[j])) for i, j in graph.edges}


def build_mst(graph: EdgeSupport, weights: Mapping[Edge, float]) -> SpanningTree:
    """Kruskal's algorithm; ties broken by ``(weight, s, e)``.

    Edges absent from ``weights`` are treated as infinitely heavy, i.e. unusable.
    """
    candidates = []
    for edge in graph.edges:
        if edge not in weights:
            continue
        w = float(weights[edge])
        if not np.isfinite(w):
            continue
        if w < 0:
            raise ConfigurationError(f"negative weight {w} on edge {edge}")
        candidates.append((w, edge[0], edge[1]))
    candidates.sort()

    uf = UnionFind(graph.node_count)
    chosen = []
    for _, s, e in candidates:
        if uf.union(s, e):
            chosen.append((s, e))
            if len(chosen) == graph.node_count - 1:
                break
    if len(chosen) != graph.node_count - 1:
        raise TopologyError("graph is disconnected under the finite-weight edges; no spanning tree exists")
    return SpanningTree(graph.node_count, tuple(chosen))


def incidence_matrix(tree: EdgeSupport) -> sp.csr_matrix:
    """Oriented incidence matrix, one row per edge: +1 at the start node, -1 at the end."""
    m = tree.edge_count
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([tree.starts, tree.ends]).ravel()
    vals = np.tile([1.0, -1.0], m)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, tree.node_count))


def augment_incidence(H) -> np.ndarray:
    """Append the row ``1/sqrt(K) * ones`` to a tree incidence matrix, giving a square invertible matrix."""
    H = H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)
    K = H.shape[1]
    if H.shape[0] != K - 1:
        raise ConfigurationError(f"augmentation needs a (K-1) x K tree incidence matrix, got {H.shape}")
    return np.vstack([H, np.full((1, K), 1.0 / np.sqrt(K))])


def laplacian(tree: EdgeSupport) -> sp.csr_matrix:
    """Graph Laplacian ``H^T H`` of the support."""
    H = incidence_matrix(tree)
    return (H.T @ H).tocsr()


def read_edge_list(path: str | Path, node_count: int | None = None) -> tuple[NetworkGraph, EdgeWeights | None]:
    """Parse ``i j [weight]`` lines (0-based ids, ``#`` starts a comment).

    Weights are returned only when every line carries one.
    """
    edges: list[Edge] = []
    weights: EdgeWeights = {}
    weighted_lines = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ConfigurationError(f"{path}:{lineno}: expected 'i j [weight]', got {raw!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigurationError(f"{path}:{lineno}: node ids must be integers") from None
        if i < 0 or j < 0:
            raise ConfigurationError(f"{path}:{lineno}: node ids must be non-negative")
        edge = (min(i, j), max(i, j))
        edges.append(edge)
        if len(parts) == 3:
            weights[edge] = float(parts[2])
            weighted_lines += 1
    if not edges:
        raise ConfigurationError(f"{path}: no edges")
    k = node_count if node_count is not None else 1 + max(max(e) for e in edges)
    graph = NetworkGraph(k, tuple(edges))
    return graph, (weights if weighted_lines == len(edges) else None)


def write_edge_list(path: str | Path, graph: EdgeSupport, weights: Mapping[Edge, float] | None = None) -> None:
    lines = []
    for s, e in graph.edges:
        if weights is None:
            lines.append(f"{s} {e}")
        else:
            lines.append(f"{s} {e} {float(weights[(s, e)])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
