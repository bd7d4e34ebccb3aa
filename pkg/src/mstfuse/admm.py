"""Decentralized generalized ADMM for the adaptive fused lasso over a penalty support.

Problem::

    minimize  1/2 sum_i ||y_i - X_i b_i||^2 + lam * sum_l sum_p w_lp |b_s(l),p - b_e(l),p|

The support is a spanning tree for the tree-based estimator or the full
network for the pairwise baseline; the update equations are identical.

Each node keeps its own copy of the edge difference and dual for every
incident edge (``+`` orientation at the start node, ``-`` at the end node).
Within a round all difference updates, then all coefficient updates, then all
dual updates are independent across nodes, so the batched array code below is
the same computation as running them node by node.

Dual sign convention: the augmented Lagrangian carries ``-<z, Hb - delta>``,
so at a KKT point ``X^T X b - X^T y - H^T z = 0`` and
``z_lp = -lam * w_lp * sign(delta_lp)`` wherever ``delta_lp != 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import linalg

from .exceptions import ConfigurationError
from .graph import EdgeSupport, incidence_matrix, laplacian
from .local import NodeDataset, fit_local_ols
from .transport import CommLedger, RoundTransport

log = logging.getLogger(__name__)

SUPPORTS = ("mst", "full_graph")


@dataclass(frozen=True)
class AdmmConfig:
    """Solver settings.

    ``d_margin`` is the slack added to the Gershgorin bound when choosing the
    proximal diagonal; ``None`` means "equal to ``tau``".
    """

    lam: float = 0.0
    tau: float = 1.0
    d_margin: float | None = None
    max_iters: int = 10000
    primal_tol: float = 1e-6
    dual_tol: float = 1e-7
    penalty_support: str = "mst"

    def __post_init__(self):
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.d_margin is not None and self.d_margin <= 0:
            raise ConfigurationError("d_margin must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be a positive integer")
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.penalty_support not in SUPPORTS:
            raise ConfigurationError(f"penalty_support must be one of {SUPPORTS}")

    @property
    def margin(self) -> float:
        return self.tau if self.d_margin is None else self.d_margin


@dataclass
class NodeState:
    """Iterate held by one node: its coefficients and, per incident edge, local copies of difference and dual."""

    node: int
    beta: np.ndarray
    delta: dict[int, np.ndarray]
    dual: dict[int, np.ndarray]
    factor: tuple | None = None


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    primal_residual: float
    dual_residual: float
    gnorm: float | None = None


@dataclass
class SolverResult:
    beta_hat: np.ndarray
    delta_hat: np.ndarray
    dual_hat: np.ndarray
    iterations: int
    converged: bool
    trajectory: list[IterationRecord]
    comm_ledger: CommLedger
    support: EdgeSupport
    diagonal: np.ndarray
    config: AdmmConfig
    delta_local: np.ndarray | None = field(default=None, repr=False)
    dual_local: np.ndarray | None = field(default=None, repr=False)

    def node_states(self) -> list[NodeState]:
        return _node_states(self.support, self.beta_hat, self.delta_local, self.dual_local)


def _node_states(support, beta, delta_local, dual_local) -> list[NodeState]:
    half = support.half_edges
    states = [NodeState(i, beta[i].copy(), {}, {}) for i in range(support.node_count)]
    for h in range(len(half)):
        st = states[half.owner[h]]
        st.delta[int(half.edge[h])] = delta_local[h].copy()
        st.dual[int(half.edge[h])] = dual_local[h].copy()
    return states


def soft_threshold(v, thresholds) -> np.ndarray:
    """Coordinate-wise ``sign(v) * max(|v| - t, 0)``."""
    v = np.asarray(v, dtype=float)
    t = np.asarray(thresholds, dtype=float)
    if np.any(t < 0):
        raise ConfigurationError("thresholds must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def choose_penalty_diagonal(degrees, tau: float, margin: float | None = None) -> np.ndarray:
    """``D_i = 2 tau deg(i) + margin``; makes ``diag(D) - tau L`` strictly diagonally dominant."""
    if tau <= 0:
        raise ConfigurationError("tau must be positive")
    margin = tau if margin is None else margin
    if margin <= 0:
        raise ConfigurationError("margin must be positive")
    return 2.0 * tau * np.asarray(degrees, dtype=float) + margin


def proximal_matrix(support: EdgeSupport, diagonal, tau: float, d: int) -> sp.csr_matrix:
    """``P = (diag(D) - tau L) kron I_d``."""
    core = sp.diags(np.asarray(diagonal, dtype=float)) - tau * laplacian(support)
    return sp.kron(core, sp.identity(d), format="csr")


def update_delta(beta_start, beta_end, dual, weights, lam: float, tau: float) -> np.ndarray:
    """Edge difference update: soft-threshold ``b_s - b_e - z/tau`` at ``lam * w / tau``."""
    v = np.asarray(beta_start, float) - np.asarray(beta_end, float) - np.asarray(dual, float) / tau
    return soft_threshold(v, lam * np.asarray(weights, float) / tau)


def update_beta(gram, moment, beta, neighbor_betas: Sequence, deltas: Sequence, duals: Sequence,
                diagonal: float, tau: float, factor=None) -> np.ndarray:
    """Node-local coefficient update.

    ``deltas`` and ``duals`` are the node's own (already sign-adjusted) copies
    for each incident edge; ``neighbor_betas`` are the values received this round.
    """
    beta = np.asarray(beta, float)
    rhs = np.asarray(moment, float) + (diagonal - tau * len(neighbor_betas)) * beta
    for dl, zl in zip(deltas, duals):
        rhs = rhs + tau * np.asarray(dl, float) + np.asarray(zl, float)
    for bj in neighbor_betas:
        rhs = rhs + tau * np.asarray(bj, float)
    if factor is None:
        try:
            factor = linalg.cho_factor(np.asarray(gram, float) + diagonal * np.eye(beta.shape[0]), lower=True)
        except linalg.LinAlgError:
            raise ConfigurationError("local system X^T X + D I is not positive definite") from None
    return linalg.cho_solve(factor, rhs)


def update_dual(dual, beta_start, beta_end, delta, tau: float) -> np.ndarray:
    """``z - tau (b_s - b_e - delta)``."""
    return np.asarray(dual, float) - tau * (np.asarray(beta_start, float) - np.asarray(beta_end, float)
                                            - np.asarray(delta, float))


def _stack(datasets: Sequence[NodeDataset]):
    grams = np.stack([ds.gram() for ds in datasets])
    moments = np.stack([ds.moment() for ds in datasets])
    return grams, moments


def _check_inputs(datasets, support: EdgeSupport, weights) -> np.ndarray:
    if len(datasets) != support.node_count:
        raise ConfigurationError(f"{len(datasets)} datasets for a support on {support.node_count} nodes")
    dims = {ds.d for ds in datasets}
    if len(dims) != 1:
        raise ConfigurationError(f"datasets have mixed dimensions {sorted(dims)}")
    d = dims.pop()
    w = np.asarray(weights, dtype=float).reshape(support.edge_count, d) if support.edge_count else np.zeros((0, d))
    if np.any(w < 0):
        raise ConfigurationError("penalty weights must be nonnegative")
    return w


def objective_value(beta, datasets: Sequence[NodeDataset], support: EdgeSupport, weights, lam: float) -> float:
    """Least-squares loss plus the weighted l1 penalty on edge differences."""
    beta = np.asarray(beta, dtype=float).reshape(len(datasets), -1)
    w = _check_inputs(datasets, support, weights)
    loss = 0.5 * sum(float(np.sum((ds.responses - ds.design @ beta[i]) ** 2)) for i, ds in enumerate(datasets))
    if support.edge_count == 0 or lam == 0:
        return loss
    diffs = beta[support.starts] - beta[support.ends]
    return loss + lam * float(np.sum(w * np.abs(diffs)))


def gnorm_distance(u, u_ref, diagonal, tau: float) -> float:
    """Distance in the semi-norm ``G = blockdiag(D kron I, 0, I / tau)``.

    ``u`` and ``u_ref`` are ``(beta, delta, dual)`` triples with ``beta`` of shape
    (K, d) and edge-level ``dual`` of shape (m, d); the difference block is ignored.
    """
    beta, _, z = u
    beta_ref, _, z_ref = u_ref
    db = np.asarray(beta, float) - np.asarray(beta_ref, float)
    dz = np.asarray(z, float) - np.asarray(z_ref, float)
    D = np.asarray(diagonal, float).reshape(-1)
    db = db.reshape(D.shape[0], -1)
    value = float(np.sum(D[:, None] * db * db)) + float(np.sum(dz * dz)) / tau
    return float(np.sqrt(max(value, 0.0)))


def kkt_residual(beta, delta, dual, datasets: Sequence[NodeDataset], support: EdgeSupport, weights,
                 lam: float) -> float:
    """Largest violation of the optimality conditions at ``(beta, delta, dual)``.

    Checks node stationarity ``X_i^T X_i b_i - X_i^T y_i - sum_l [H]_li z_l``,
    feasibility ``H b - delta`` and dual admissibility ``|z| <= lam w`` with
    ``z = -lam w sign(delta)`` on the nonzero differences.
    """
    w = _check_inputs(datasets, support, weights)
    K = support.node_count
    beta = np.asarray(beta, float).reshape(K, -1)
    delta = np.asarray(delta, float).reshape(w.shape)
    dual = np.asarray(dual, float).reshape(w.shape)
    grams, moments = _stack(datasets)
    grad = np.einsum("kij,kj->ki", grams, beta) - moments
    if support.edge_count:
        np.add.at(grad, support.starts, -dual)
        np.add.at(grad, support.ends, dual)
    parts = [float(np.max(np.abs(grad)))]
    if support.edge_count:
        parts.append(float(np.max(np.abs(beta[support.starts] - beta[support.ends] - delta))))
        bound = lam * w
        parts.append(float(np.max(np.maximum(np.abs(dual) - bound, 0.0))))
        active = delta != 0
        if np.any(active):
            parts.append(float(np.max(np.abs(dual[active] + bound[active] * np.sign(delta[active])))))
    return max(parts)


def _local_inverses(grams: np.ndarray, diagonal: np.ndarray) -> np.ndarray:
    """Inverse of each ``X_i^T X_i + D_i I`` obtained from its Cholesky factor (computed once per solve)."""
    K, d, _ = grams.shape
    eye = np.eye(d)
    out = np.empty_like(grams)
    for i in range(K):
        try:
            factor = linalg.cho_factor(grams[i] + diagonal[i] * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise ConfigurationError(f"node {i}: X^T X + D I is not positive definite") from None
        out[i] = linalg.cho_solve(factor, eye, check_finite=False)
    return out


def _loss_from_moments(grams, moments, yty, beta) -> float:
    gb = np.einsum("kij,kj->ki", grams, beta)
    return 0.5 * float(np.sum(beta * gb) - 2.0 * np.sum(moments * beta) + yty)


def run_solver(datasets: Sequence[NodeDataset], support: EdgeSupport, weights, config: AdmmConfig,
               transport: RoundTransport | None = None, *, reference=None, record_trajectory: bool = True,
               init=None, callback: Callable | None = None, ridge: float = 0.0) -> SolverResult:
    """Run the decentralized generalized ADMM until both stopping criteria hold.

    Parameters
    ----------
    datasets : sequence of NodeDataset
        One dataset per node of ``support``.
    support : EdgeSupport
        Penalty (and communication) edges.
    weights : array-like, shape (m, d)
        Adaptive weight vector per support edge.
    config : AdmmConfig
    transport : RoundTransport, optional
        Carries the per-round coefficient exchange; created over ``support`` if omitted.
    reference : tuple, optional
        ``(beta, delta, dual)`` point; when given, the G-norm distance to it is recorded.
    record_trajectory : bool
        Record objective and residuals every iteration.
    init : tuple, optional
        ``(beta, delta, dual)`` warm start. The default is the local OLS start
        with ``delta_l = b_s - b_e`` and zero duals.
    callback : callable, optional
        Called as ``callback(t, beta, delta_local, dual_local)`` after each
        completed round, once the dual at iteration ``t`` is final.

    Returns
    -------
    SolverResult
        Non-convergence within ``max_iters`` is reported through ``converged``.

    Notes
    -----
    Round ``t`` opens with every node sending ``b_i^t`` to its support
    neighbors. With the neighbors' ``b_j^t`` in hand a node completes its dual
    update for iteration ``t``, evaluates the local stopping quantities, and
    then computes ``delta^{t+1}`` and ``b_i^{t+1}``. One vector per link per
    iteration is therefore all that crosses the network.
    """
    w = _check_inputs(datasets, support, weights)
    K, d = support.node_count, datasets[0].d
    tau, lam = config.tau, config.lam
    half = support.half_edges
    owner, other, hedge = half.owner, half.other, half.edge
    if transport is None:
        transport = RoundTransport(support)
    transport.set_bucket("iterate")

    grams, moments = _stack(datasets)
    yty = float(sum(ds.responses @ ds.responses for ds in datasets))
    diagonal = choose_penalty_diagonal(support.degree, tau, config.margin)
    inverses = _local_inverses(grams, diagonal)
    self_coef = (diagonal - tau * support.degree)[:, None]
    thresholds = lam * w[hedge] / tau
    sign = half.sign[:, None]
    # half-edges are sorted by owner, so per-node sums are contiguous segments
    offsets = np.searchsorted(owner, np.arange(K)) if len(half) else None

    if init is None:
        beta = np.stack([fit_local_ols(ds, ridge).coefficients for ds in datasets])
        delta = beta[owner] - beta[other]
        z = np.zeros((len(half), d))
    else:
        b0, d0, z0 = init
        beta = np.array(b0, dtype=float).reshape(K, d)
        delta = sign * np.asarray(d0, float).reshape(support.edge_count, d)[hedge]
        z = sign * np.asarray(z0, float).reshape(support.edge_count, d)[hedge]

    trajectory: list[IterationRecord] = []
    edge_rows = np.flatnonzero(half.sign > 0)  # start-node copies, one per edge, ordered as below
    edge_order = hedge[edge_rows]
    to_edge = np.empty(support.edge_count, dtype=np.intp)
    to_edge[edge_order] = edge_rows

    def edge_view(local):
        return local[to_edge]

    def record(t, primal, change):
        penalty = lam * float(np.sum(w * np.abs(edge_view(delta)))) if support.edge_count else 0.0
        rec = IterationRecord(t, _loss_from_moments(grams, moments, yty, beta) + penalty, primal, change)
        if reference is not None:
            rec.gnorm = gnorm_distance((beta, None, edge_view(z)), reference, diagonal, tau)
        trajectory.append(rec)

    converged = False
    prev_beta = None
    t = 0
    while True:
        received = transport.exchange(beta)
        if t > 0:
            gap = beta[owner] - received - delta
            z = z - tau * gap
            primal = float(np.max(np.abs(gap))) if len(half) else 0.0
            change = float(np.max(np.abs(beta - prev_beta)))
            if record_trajectory:
                record(t, primal, change)
            if callback is not None:
                callback(t, beta, delta, z)
            if primal <= config.primal_tol and change <= config.dual_tol:
                converged = True
                break
        else:
            if record_trajectory:
                record(0, float(np.max(np.abs(beta[owner] - received - delta))) if len(half) else 0.0, np.nan)
            if callback is not None:
                callback(0, beta, delta, z)
        if t >= config.max_iters:
            break

        delta = soft_threshold(beta[owner] - received - z / tau, thresholds)
        rhs = moments + self_coef * beta
        if len(half):
            rhs = rhs + np.add.reduceat(tau * delta + z, offsets, axis=0) \
                + tau * np.add.reduceat(received, offsets, axis=0)
        prev_beta = beta
        beta = np.einsum("kij,kj->ki", inverses, rhs)
        t += 1

    if not converged:
        log.info("ADMM stopped at max_iters=%d without meeting tolerances", config.max_iters)
    return SolverResult(
        beta_hat=beta,
        delta_hat=edge_view(delta).copy(),
        dual_hat=edge_view(z).copy(),
        iterations=t,
        converged=converged,
        trajectory=trajectory,
        comm_ledger=transport.ledger,
        support=support,
        diagonal=diagonal,
        config=config,
        delta_local=delta,
        dual_local=z,
    )


def antisymmetry_violation(support: EdgeSupport, delta_local, dual_local) -> float:
    """Largest ``|x_h + x_twin(h)|`` over node-local difference and dual copies (0 when exact)."""
    twin = support.half_edges.twin
    if len(twin) == 0:
        return 0.0
    return float(max(np.max(np.abs(delta_local + delta_local[twin])),
                     np.max(np.abs(dual_local + dual_local[twin]))))


@dataclass
class ReferenceSolution:
    beta: np.ndarray
    delta: np.ndarray
    dual: np.ndarray
    iterations: int
    converged: bool
    polished: bool


def centralized_reference_solve(datasets: Sequence[NodeDataset], support: EdgeSupport, weights,
                                config: AdmmConfig, *, polish: bool = True) -> ReferenceSolution:
    """Single-machine ADMM with the exact coupled coefficient update.

    Iterates the difference, joint coefficient (``(X^T X + tau L kron I)^{-1}``)
    and dual updates to the configured tolerances. With ``polish`` the
    detected fused set and signs are used to solve the optimality system
    exactly; the polished point is kept only if it is consistent with that
    set and sign pattern.
    """
    w = _check_inputs(datasets, support, weights)
    K, d = support.node_count, datasets[0].d
    tau, lam = config.tau, config.lam
    grams, moments = _stack(datasets)
    Q = linalg.block_diag(*grams)
    c = moments.reshape(-1)
    Hu = np.kron(incidence_matrix(support).toarray(), np.eye(d))
    wv = w.reshape(-1)
    try:
        factor = linalg.cho_factor(Q + tau * Hu.T @ Hu)
    except linalg.LinAlgError:
        raise ConfigurationError("X^T X + tau L kron I is not positive definite") from None

    beta = np.concatenate([fit_local_ols(ds).coefficients for ds in datasets])
    delta = Hu @ beta
    z = np.zeros_like(delta)
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        delta = soft_threshold(Hu @ beta - z / tau, lam * wv / tau)
        new_beta = linalg.cho_solve(factor, c + Hu.T @ (tau * delta + z))
        gap = Hu @ new_beta - delta
        z = z - tau * gap
        change = float(np.max(np.abs(new_beta - beta)))
        beta = new_beta
        primal = float(np.max(np.abs(gap))) if gap.size else 0.0
        if primal <= config.primal_tol and change <= config.dual_tol:
            converged = True
            break

    polished = False
    if polish and Hu.shape[0]:
        refined = _polish(Q, c, Hu, wv, lam, delta)
        if refined is not None:
            beta, delta, z = refined
            polished = True
    return ReferenceSolution(beta.reshape(K, d), delta.reshape(-1, d), z.reshape(-1, d), it, converged, polished)


def _polish(Q, c, Hu, wv, lam, delta):
    fused = delta == 0
    signs = np.sign(delta)
    active = ~fused
    Hf = Hu[fused]
    rhs_b = c - lam * Hu[active].T @ (wv[active] * signs[active])
    nf = Hf.shape[0]
    kkt = np.block([[Q, Hf.T], [Hf, np.zeros((nf, nf))]])
    try:
        sol = np.linalg.solve(kkt, np.concatenate([rhs_b, np.zeros(nf)]))
    except np.linalg.LinAlgError:
        return None
    beta = sol[: Q.shape[0]]
    new_delta = Hu @ beta
    new_delta[fused] = 0.0
    if np.any(np.sign(new_delta[active]) != signs[active]):
        return None
    # dual from stationarity Q b - c - Hu^T z = 0; unique when Hu has full row rank
    z, *_ = np.linalg.lstsq(Hu.T, Q @ beta - c, rcond=None)
    bound = lam * wv
    if np.any(np.abs(z[fused]) > bound[fused] * (1 + 1e-9) + 1e-9):
        return None
    return beta, new_delta, z
