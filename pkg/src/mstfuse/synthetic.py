"""Random geometric networks, spatially clustered regression models and node datasets.

All randomness flows through :func:`stream`, a Philox (counter-based) generator
keyed by ``(seed, purpose, replication, node/attempt)``. Draws for one node or
replication therefore never depend on the order in which others are generated.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .exceptions import ConfigurationError, GenerationError
from .graph import NetworkGraph, is_connected
from .local import NodeDataset

log = logging.getLogger(__name__)

# stream purposes
GRAPH, CLUSTERS, DATA, COEFFICIENTS = 1, 2, 3, 4

DEFAULT_COEFFICIENTS = np.array([
    [1.0, 1.0],
    [-1.0, 2.0],
    [3.0, -1.0],
    [-2.0, -2.0],
    [2.0, 3.0],
    [0.0, -3.0],
])


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, purpose, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(purpose),) + tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ClusterModel:
    """Ground truth: coefficient vector per cluster and the node -> cluster map."""

    coefficients: np.ndarray
    assignment: np.ndarray
    noise_sd: float

    @property
    def cluster_count(self) -> int:
        return self.coefficients.shape[0]

    @property
    def d(self) -> int:
        return self.coefficients.shape[1]

    def node_coefficients(self) -> np.ndarray:
        """(K, d) array of the true coefficients of each node."""
        return self.coefficients[self.assignment]

    def members(self) -> list[list[int]]:
        return [np.flatnonzero(self.assignment == s).tolist() for s in range(self.cluster_count)]


def generate_geometric_graph(K: int, radius: float, seed: int, replication: int = 0,
                             max_retries: int = 100) -> NetworkGraph:
    """Uniform points in the unit square, linked when within ``radius`` of each other.

    Placements are redrawn (with deterministically derived streams) until the
    graph is connected.
    """
    if K < 2:
        raise ConfigurationError("need at least two nodes")
    if not (0 < radius <= np.sqrt(2)):
        raise ConfigurationError(f"radius must lie in (0, sqrt(2)], got {radius}")
    for attempt in range(max_retries):
        pts = stream(seed, GRAPH, replication, attempt).uniform(size=(K, 2))
        dist = squareform(pdist(pts))
        ii, jj = np.nonzero(np.triu(dist <= radius, k=1))
        edges = tuple(zip(ii.tolist(), jj.tolist()))
        if is_connected(K, edges):
            return NetworkGraph(K, edges, positions=pts)
        log.debug("geometric graph attempt %d disconnected", attempt)
    raise GenerationError(f"no connected geometric graph with K={K}, r={radius} after {max_retries} draws; "
                          "try a larger radius")


def cluster_is_connected(graph, members: Sequence[int]) -> bool:
    """Whether ``members`` induce a connected subgraph of ``graph``."""
    members = list(members)
    if len(members) <= 1:
        return True
    index = {v: k for k, v in enumerate(members)}
    sub = [(index[s], index[e]) for s, e in graph.edges if s in index and e in index]
    return is_connected(len(members), sub)


def audit_assumption(graph, assignment) -> bool:
    """Every cluster with two or more members induces a connected subgraph."""
    assignment = np.asarray(assignment)
    return all(cluster_is_connected(graph, np.flatnonzero(assignment == s))
               for s in np.unique(assignment))


def _coefficient_table(S: int, d: int, scheme, rng) -> np.ndarray:
    if isinstance(scheme, str):
        if scheme == "default":
            if S > DEFAULT_COEFFICIENTS.shape[0]:
                raise GenerationError(f"default coefficient table has {DEFAULT_COEFFICIENTS.shape[0]} rows; "
                                      f"S={S} needs scheme='random'")
            cols = np.arange(d) % DEFAULT_COEFFICIENTS.shape[1]
            return DEFAULT_COEFFICIENTS[:S][:, cols].copy()
        if scheme == "random":
            for _ in range(1000):
                table = rng.integers(-3, 4, size=(S, d)).astype(float)
                if S < 2 or np.min(pdist(table, "chebyshev")) >= 1:
                    return table
            raise GenerationError("could not draw distinct random coefficients")
        raise ConfigurationError(f"unknown coefficient scheme {scheme!r}")
    table = np.asarray(scheme, dtype=float)
    if table.shape != (S, d):
        raise ConfigurationError(f"coefficient table must have shape ({S}, {d}), got {table.shape}")
    return table.copy()


def generate_cluster_model(graph: NetworkGraph, S: int, d: int, coefficient_scheme="default",
                           sigma: float = 0.5, seed: int = 0, replication: int = 0) -> ClusterModel:
    """Partition nodes into ``S`` contiguous clusters by multi-source breadth-first growth.

    Sources are drawn at random. Clusters then take turns (round robin, in
    label order) claiming one unassigned neighbor of their oldest member that
    still has one, so every cluster stays connected in ``graph`` and sizes stay
    comparable.
    """
    K = graph.node_count
    if not (1 <= S <= K):
        raise ConfigurationError(f"need 1 <= S <= K, got S={S}, K={K}")
    if d < 1:
        raise ConfigurationError("d must be positive")
    if sigma < 0:
        raise ConfigurationError("sigma must be nonnegative")
    rng = stream(seed, CLUSTERS, replication)
    sources = rng.choice(K, size=S, replace=False)
    assignment = np.full(K, -1, dtype=np.intp)
    frontiers = []
    for label, src in enumerate(sources):
        assignment[src] = label
        frontiers.append(deque([int(src)]))
    active = True
    while active:
        active = False
        for label, frontier in enumerate(frontiers):
            while frontier:
                free = [u for u in graph.neighbors[frontier[0]] if assignment[u] < 0]
                if free:
                    assignment[free[0]] = label
                    frontier.append(free[0])
                    active = True
                    break
                frontier.popleft()
    if np.any(assignment < 0):
        raise GenerationError("breadth-first growth did not reach every node")
    if not audit_assumption(graph, assignment):
        raise GenerationError("a generated cluster is not connected in the network")

    table = _coefficient_table(S, d, coefficient_scheme, stream(seed, COEFFICIENTS, replication))
    if S > 1 and np.min(pdist(table, "chebyshev")) <= 0:
        raise GenerationError("cluster coefficient vectors are not distinct")
    return ClusterModel(coefficients=table, assignment=assignment, noise_sd=float(sigma))


def generate_datasets(graph, model: ClusterModel, n: int, seed: int, replication: int = 0) -> list[NodeDataset]:
    """Standard normal covariates and ``y = x^T b_cluster + N(0, sigma^2)`` noise at every node."""
    if n < 1:
        raise ConfigurationError("n must be positive")
    if n < model.d:
        log.warning("n=%d < d=%d: local least squares will be singular", n, model.d)
    out = []
    coefs = model.node_coefficients()
    for i in range(graph.node_count):
        rng = stream(seed, DATA, replication, i)
        X = rng.standard_normal((n, model.d))
        noise = rng.standard_normal(n)
        out.append(NodeDataset(X, X @ coefs[i] + model.noise_sd * noise, node_id=i))
    return out


def write_dataset(path: str | Path, data: NodeDataset) -> None:
    """Columnar text: header ``d n``, then one ``x_1 ... x_d y`` row per sample."""
    rows = np.column_stack([data.design, data.responses])
    lines = [f"{data.d} {data.n}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path, node_id: int = 0) -> NodeDataset:
    text = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not text:
        raise ConfigurationError(f"{path}: empty dataset file")
    try:
        d, n = (int(v) for v in text[0].split())
    except ValueError:
        raise ConfigurationError(f"{path}: header must be 'd n'") from None
    body = np.array([[float(v) for v in ln.split()] for ln in text[1:]]).reshape(-1, d + 1)
    if body.shape[0] != n:
        raise ConfigurationError(f"{path}: header declares {n} rows, found {body.shape[0]}")
    return NodeDataset(body[:, :d], body[:, d], node_id=node_id)


def write_datasets(directory: str | Path, datasets: Sequence[NodeDataset]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, ds in enumerate(datasets):
        write_dataset(directory / f"node_{i:04d}.txt", ds)


def read_datasets(directory: str | Path) -> list[NodeDataset]:
    files = sorted(Path(directory).glob("node_*.txt"))
    if not files:
        raise ConfigurationError(f"{directory}: no node_*.txt files")
    return [read_dataset(f, node_id=i) for i, f in enumerate(files)]
