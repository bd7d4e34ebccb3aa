"""Node-local least squares and adaptive fusion weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import ConfigurationError, EstimationError

DEFAULT_WEIGHT_CAP = 1e12


@dataclass(frozen=True)
class NodeDataset:
    """Design matrix ``design`` (n x d) and responses ``responses`` (n,) held by one node."""

    design: np.ndarray
    responses: np.ndarray
    node_id: int = 0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.responses, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ConfigurationError(f"node {self.node_id}: design has {X.shape[0]} rows but {y.shape[0]} responses")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ConfigurationError(f"node {self.node_id}: non-finite data")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]

    def gram(self) -> np.ndarray:
        return self.design.T @ self.design

    def moment(self) -> np.ndarray:
        return self.design.T @ self.responses


@dataclass(frozen=True)
class OlsEstimate:
    coefficients: np.ndarray
    gram_rank: int


def fit_local_ols(data: NodeDataset, ridge: float = 0.0) -> OlsEstimate:
    """Solve ``(X^T X + ridge I) b = X^T y`` by Cholesky factorization.

    With ``ridge == 0`` this is exact OLS and requires a nonsingular Gram matrix.
    """
    if ridge < 0:
        raise ConfigurationError("ridge must be nonnegative")
    gram = data.gram()
    rank = int(np.linalg.matrix_rank(gram))
    if ridge == 0 and rank < data.d:
        raise EstimationError(f"node {data.node_id}: Gram matrix is singular (rank {rank} < d={data.d}); "
                              "set a positive ridge", node_id=data.node_id)
    system = gram + ridge * np.eye(data.d)
    try:
        factor = linalg.cho_factor(system, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise EstimationError(f"node {data.node_id}: Gram matrix is not positive definite",
                              node_id=data.node_id) from None
    coef = linalg.cho_solve(factor, data.moment(), check_finite=False)
    return OlsEstimate(coefficients=coef, gram_rank=rank)


def adaptive_weights(ols_i, ols_j, gamma: float = 1.0, cap: float = DEFAULT_WEIGHT_CAP) -> np.ndarray:
    """Per-coordinate weights ``1 / |b_i - b_j|**gamma``, clipped at ``cap``.

    The cap stands in for the infinite weight at coinciding coordinates, so that
    such coordinates stay fused at any practical penalty level.
    """
    if gamma <= 0 or cap <= 0:
        raise ConfigurationError("gamma and cap must be positive")
    bi = np.asarray(getattr(ols_i, "coefficients", ols_i), dtype=float)
    bj = np.asarray(getattr(ols_j, "coefficients", ols_j), dtype=float)
    if bi.shape != bj.shape:
        raise ConfigurationError(f"dimension mismatch {bi.shape} vs {bj.shape}")
    gap = np.abs(bi - bj) ** gamma
    with np.errstate(divide="ignore"):
        w = np.where(gap > 0, 1.0 / np.where(gap > 0, gap, 1.0), np.inf)
    return np.minimum(w, cap)


def edge_weight_table(support, ols, gamma: float = 1.0, cap: float = DEFAULT_WEIGHT_CAP) -> np.ndarray:
    """Stack adaptive weights for every edge of ``support`` into an (m, d) array."""
    d = np.asarray(getattr(ols[0], "coefficients", ols[0])).shape[0]
    table = np.empty((support.edge_count, d))
    for l, (s, e) in enumerate(support.edges):
        table[l] = adaptive_weights(ols[s], ols[e], gamma, cap)
    return table
