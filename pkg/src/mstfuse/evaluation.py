"""Cluster recovery, accuracy metrics and statistical diagnostics for fitted models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .exceptions import DiagnosticError
from .graph import (EdgeSupport, augment_incidence, build_mst, connected_components, incidence_matrix,
                    similarity_weights)
from .local import fit_local_ols
from .synthetic import ClusterModel, cluster_is_connected, generate_datasets

DEFAULT_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class ClusterPartition:
    cluster_of: np.ndarray
    cluster_count: int
    fused_edges: tuple[tuple[int, int], ...]
    # a non-fused support edge joins two nodes of the same component (only possible off-tree)
    intransitive: bool = False


def _canonical_labels(labels) -> np.ndarray:
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(v), len(mapping)) for v in labels], dtype=np.intp)


def extract_clusters(delta_hat, support: EdgeSupport, zero_tol: float = DEFAULT_ZERO_TOL) -> ClusterPartition:
    """Connected components of the support after dropping every edge with a nonzero difference.

    An edge counts as fused only when all of its coordinates are within ``zero_tol`` of zero.
    """
    delta_hat = np.asarray(delta_hat, dtype=float).reshape(support.edge_count, -1)
    fused_mask = np.all(np.abs(delta_hat) <= zero_tol, axis=1) if support.edge_count else np.zeros(0, bool)
    fused = tuple(e for e, f in zip(support.edges, fused_mask) if f)
    labels = _canonical_labels(connected_components(support.node_count, fused))
    intransitive = any(labels[s] == labels[e] for (s, e), f in zip(support.edges, fused_mask) if not f)
    return ClusterPartition(labels, int(labels.max()) + 1, fused, intransitive)


def coefficient_mse(beta_hat, truth: ClusterModel) -> float:
    """Mean squared error per coefficient: ``sum_i ||b_i - b_true(i)||^2 / (K d)``."""
    target = truth.node_coefficients()
    beta_hat = np.asarray(beta_hat, dtype=float).reshape(target.shape)
    return float(np.mean((beta_hat - target) ** 2))


@dataclass(frozen=True)
class SelectionRecord:
    exact_recovery: bool
    rand_index: float
    s_hat: int


def _labels_of(obj) -> np.ndarray:
    if isinstance(obj, ClusterPartition):
        return obj.cluster_of
    if isinstance(obj, ClusterModel):
        return obj.assignment
    return np.asarray(obj)


def rand_index(a, b) -> float:
    a, b = _labels_of(a), _labels_of(b)
    if a.shape != b.shape:
        raise ValueError("partitions cover different node sets")
    K = a.shape[0]
    if K < 2:
        return 1.0
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    iu = np.triu_indices(K, 1)
    return float(np.mean(same_a[iu] == same_b[iu]))


def selection_accuracy(partition, truth) -> SelectionRecord:
    """Exact partition recovery, Rand index and estimated cluster count."""
    est, ref = _labels_of(partition), _labels_of(truth)
    exact = bool(np.array_equal(_canonical_labels(est), _canonical_labels(ref)))
    return SelectionRecord(exact, rand_index(est, ref), int(len(np.unique(est))))


def clusters_connected_in_tree(tree: EdgeSupport, truth: ClusterModel) -> bool:
    """Whether every true cluster induces a connected subtree of ``tree``."""
    return all(cluster_is_connected(tree, members) for members in truth.members())


def lemma1_trial(graph, truth: ClusterModel, n: int, replications: int, seed: int, ridge: float = 0.0) -> float:
    """Fraction of data replications whose similarity tree keeps every cluster connected."""
    hits = 0
    for r in range(replications):
        datasets = generate_datasets(graph, truth, n, seed, replication=r)
        ols = [fit_local_ols(ds, ridge) for ds in datasets]
        tree = build_mst(graph, similarity_weights(graph, ols))
        hits += clusters_connected_in_tree(tree, truth)
    return hits / replications


@dataclass(frozen=True)
class NormalitySample:
    """One replication's estimate and truth on the nonzero coordinates, with the design's ``C`` block."""

    delta_hat: np.ndarray
    delta_star: np.ndarray
    c_block: np.ndarray


def normality_sample(beta_hat, truth: ClusterModel, datasets, tree: EdgeSupport) -> NormalitySample:
    """Map a fitted coefficient vector to augmented differences and restrict to the true nonzeros.

    The differences are ``(H~ kron I_d) b``, where ``H~`` is the tree incidence
    matrix with the scaled all-ones row appended. ``c_block`` is the matching
    submatrix of ``(1/N) (X Hu~^-1)^T (X Hu~^-1)``.

    The last ``d`` coordinates (the scaled node average) are never penalized,
    so they are always kept, even when their true value happens to be zero.
    """
    d = truth.d
    Hu = np.kron(augment_incidence(incidence_matrix(tree)), np.eye(d))
    delta_hat = Hu @ np.asarray(beta_hat, float).reshape(-1)
    delta_star = Hu @ truth.node_coefficients().reshape(-1)
    keep = delta_star != 0
    keep[-d:] = True
    nonzero = np.flatnonzero(keep)
    N = sum(ds.n for ds in datasets)
    gram = linalg.block_diag(*[ds.gram() for ds in datasets])
    Hinv = np.linalg.inv(Hu)
    C = Hinv.T @ gram @ Hinv / N
    return NormalitySample(delta_hat[nonzero], delta_star[nonzero], C[np.ix_(nonzero, nonzero)])


@dataclass(frozen=True)
class NormalityRecord:
    ks_statistic: float
    critical_value: float
    p_value: float
    passed: bool
    count: int


def standardized_errors(samples: Sequence[NormalitySample], N: int, sigma: float) -> np.ndarray:
    """Whitened ``sqrt(N) (delta_hat - delta_star)`` under covariance ``sigma^2 C^-1``, pooled."""
    pooled = []
    for s in samples:
        if s.delta_hat.size == 0:
            continue
        try:
            chol = np.linalg.cholesky(s.c_block)
        except np.linalg.LinAlgError:
            raise DiagnosticError(f"covariance block is singular (condition number {np.linalg.cond(s.c_block):.3g})"
                                  ) from None
        pooled.append(chol.T @ (np.sqrt(N) * (s.delta_hat - s.delta_star)) / sigma)
    if not pooled:
        raise DiagnosticError("no nonzero coordinates to test")
    return np.concatenate(pooled)


def normality_diagnostic(samples: Sequence[NormalitySample], N: int, sigma: float,
                         alpha: float = 0.01) -> NormalityRecord:
    """Kolmogorov-Smirnov test of the pooled standardized errors against N(0, 1)."""
    if sigma <= 0:
        raise DiagnosticError("sigma must be positive")
    z = standardized_errors(samples, N, sigma)
    res = stats.kstest(z, "norm")
    crit = float(stats.kstwo.ppf(1 - alpha, z.size))
    return NormalityRecord(float(res.statistic), crit, float(res.pvalue), bool(res.statistic < crit), int(z.size))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    geometric_ratio: float
    points: int


def convergence_rate_fit(distances, burn_in: float = 0.25, floor: float = 1e-12, min_points: int = 10) -> RateFit:
    """Least-squares line through ``log(distance)`` against iteration on the trajectory tail.

    The trajectory is cut at the first value at or below ``floor``; the first
    ``burn_in`` fraction of what remains is discarded before fitting.
    """
    dist = np.asarray(distances, dtype=float)
    below = np.flatnonzero(~(dist > floor))
    if below.size:
        dist = dist[: below[0]]
    if dist.size < min_points:
        raise DiagnosticError(f"trajectory has {dist.size} usable points, need {min_points}")
    start = int(np.floor(burn_in * dist.size))
    if dist.size - start < 2:
        raise DiagnosticError("tail too short after burn-in")
    t = np.arange(start, dist.size, dtype=float)
    logd = np.log(dist[start:])
    slope, intercept = np.polyfit(t, logd, 1)
    resid = logd - (slope * t + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((logd - logd.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return RateFit(float(slope), float(intercept), r2, float(np.exp(slope)), int(t.size))

