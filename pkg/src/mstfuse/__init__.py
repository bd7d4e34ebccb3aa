"""Cluster node-level linear regressions over a network with a similarity-tree fused lasso.

The estimator penalizes coefficient differences along a minimum spanning tree
of the network (edge weights: distance between local OLS fits) with adaptive
l1 weights, and is solved by a decentralized generalized ADMM in which nodes
only exchange their current coefficients with tree neighbors.
"""

__version__ = "0.1.0"

from .admm import (AdmmConfig, SolverResult, centralized_reference_solve, kkt_residual, objective_value,
                   run_solver, soft_threshold)
from .evaluation import coefficient_mse, extract_clusters, selection_accuracy
from .graph import NetworkGraph, SpanningTree, build_mst, incidence_matrix, laplacian, similarity_weights
from .local import NodeDataset, adaptive_weights, fit_local_ols
from .transport import CommLedger, RoundTransport

__all__ = [
    "AdmmConfig", "SolverResult", "centralized_reference_solve", "kkt_residual", "objective_value", "run_solver",
    "soft_threshold", "coefficient_mse", "extract_clusters", "selection_accuracy", "NetworkGraph", "SpanningTree",
    "build_mst", "incidence_matrix", "laplacian", "similarity_weights", "NodeDataset", "adaptive_weights",
    "fit_local_ols", "CommLedger", "RoundTransport",
]
