"""Acceptance criteria 1-10. Each test records one PASS/FAIL line (see conftest.py) before asserting."""
import csv
import dataclasses
import functools
from fractions import Fraction
import io
import time

import numpy as np
import pytest

from mstfuse.admm import AdmmConfig, centralized_reference_solve, kkt_residual, objective_value, run_solver
from mstfuse.evaluation import convergence_rate_fit, lemma1_trial, normality_diagnostic, normality_sample
from mstfuse.experiment import ExperimentConfig, build_design, build_instance, reports_to_csv, run_arms, run_experiment
from mstfuse.graph import SpanningTree
from mstfuse.local import NodeDataset, edge_weight_table, fit_local_ols
from mstfuse.synthetic import generate_cluster_model, generate_geometric_graph

from conftest import ACCEPTANCE_RESULTS

pytestmark = pytest.mark.acceptance


def record(number, title, passed, detail):
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
    print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


def clustered_instance(rng, K, d, n, tree, sigma=0.5):
    centers = rng.integers(-2, 3, size=(2, d)).astype(float)
    labels = rng.integers(0, 2, K)
    datasets = []
    for i in range(K):
        X = rng.standard_normal((n, d))
        datasets.append(NodeDataset(X, X @ centers[labels[i]] + sigma * rng.standard_normal(n), i))
    return datasets, edge_weight_table(tree, [fit_local_ols(ds) for ds in datasets])


@functools.lru_cache(maxsize=None)
def criterion1_runs():
    """20 random tree instances solved both ways; shared by criteria 1 and 2."""
    rng = np.random.default_rng(101)
    runs = []
    start = time.perf_counter()
    for k in range(20):
        K, d, n = (2, 4, 6)[k % 3], (1, 2, 3)[(k // 3) % 3], 30
        tree = SpanningTree(K, [(int(rng.integers(0, i)), i) for i in range(1, K)])
        datasets, w = clustered_instance(rng, K, d, n, tree)
        lam = float(rng.uniform(0.1, 5.0) * np.sqrt(K * n) / 5)
        cfg = AdmmConfig(lam=lam, tau=float(n), primal_tol=1e-10, dual_tol=1e-11, max_iters=100_000)
        runs.append((datasets, tree, w, cfg, run_solver(datasets, tree, w, cfg, record_trajectory=False),
                     centralized_reference_solve(datasets, tree, w, cfg)))
    return runs, time.perf_counter() - start


def test_criterion_1_solver_oracle_equivalence():
    runs, elapsed = criterion1_runs()
    obj_gap = max(abs(objective_value(r.beta_hat, ds, t, w, c.lam) - objective_value(ref.beta, ds, t, w, c.lam))
                  for ds, t, w, c, r, ref in runs)
    beta_gap = max(float(np.max(np.abs(r.beta_hat - ref.beta))) for *_, r, ref in runs)
    record(1, "solver/oracle equivalence", obj_gap <= 1e-6 and beta_gap <= 1e-5 and elapsed < 10,
           f"max objective gap {obj_gap:.2e} (<=1e-6), max beta gap {beta_gap:.2e} (<=1e-5), {elapsed:.1f}s (<10s)")


def test_criterion_2_kkt_certification():
    runs, _ = criterion1_runs()
    converged = [(ds, t, w, c, r) for ds, t, w, c, r, _ in runs if r.converged]
    worst = max(kkt_residual(r.beta_hat, r.delta_hat, r.dual_hat, ds, t, w, c.lam) for ds, t, w, c, r in converged)
    record(2, "KKT certification", worst <= 1e-5 and converged,
           f"{len(converged)}/20 converged, max KKT residual {worst:.2e} (<=1e-5)")


def test_criterion_3_endpoint_limits():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    tree = SpanningTree(4, [(0, 1), (1, 2), (2, 3)])
    datasets = []
    for i in range(4):
        X = rng.standard_normal((40, 2))
        datasets.append(NodeDataset(X, X @ rng.standard_normal(2) + 0.5 * rng.standard_normal(40), i))
    w = edge_weight_table(tree, [fit_local_ols(ds) for ds in datasets])
    ols = np.stack([fit_local_ols(ds).coefficients for ds in datasets])
    zero = run_solver(datasets, tree, w, AdmmConfig(lam=0.0, tau=40.0))
    gap0 = float(np.max(np.abs(zero.beta_hat - ols)))
    X = np.vstack([ds.design for ds in datasets])
    y = np.concatenate([ds.responses for ds in datasets])
    pooled = np.linalg.lstsq(X, y, rcond=None)[0]
    big = run_solver(datasets, tree, w, AdmmConfig(lam=1e6, tau=40.0, primal_tol=1e-10, dual_tol=1e-11,
                                                   max_iters=100_000))
    gap_big = float(np.max(np.abs(big.beta_hat - pooled)))
    elapsed = time.perf_counter() - start
    record(3, "endpoint limits", gap0 <= 1e-6 and gap_big <= 1e-5 and elapsed < 5,
           f"lambda=0 vs local OLS {gap0:.2e} (<=1e-6), lambda=1e6 vs pooled OLS {gap_big:.2e} (<=1e-5), "
           f"{elapsed:.2f}s (<5s)")


def test_criterion_4_linear_convergence():
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    tree = SpanningTree(4, [(0, 1), (1, 2), (2, 3)])
    truth = np.array([[1.0, 1.0], [1.0, 1.0], [-1.0, 2.0], [-1.0, 2.0]])
    datasets = []
    for i in range(4):
        X = rng.standard_normal((30, 2))
        datasets.append(NodeDataset(X, X @ truth[i] + 0.5 * rng.standard_normal(30), i))
    w = edge_weight_table(tree, [fit_local_ols(ds) for ds in datasets])
    ref = centralized_reference_solve(datasets, tree, w, AdmmConfig(lam=0.5, primal_tol=1e-10, dual_tol=1e-10,
                                                                    max_iters=100_000))
    res = run_solver(datasets, tree, w, AdmmConfig(lam=0.5, primal_tol=1e-14, dual_tol=1e-14, max_iters=20_000),
                     reference=(ref.beta, ref.delta, ref.dual))
    g = np.array([rec.gnorm for rec in res.trajectory])
    rises = np.diff(g[1:])
    monotone = bool(np.all(rises <= 1e-10))
    fit = convergence_rate_fit(g)
    elapsed = time.perf_counter() - start
    record(4, "linear convergence", monotone and fit.geometric_ratio < 1 and fit.r_squared >= 0.98 and elapsed < 10,
           f"monotone after t=1: {monotone} (largest rise {rises.max():.1e}), ratio {fit.geometric_ratio:.4f} (<1), "
           f"r^2 {fit.r_squared:.5f} (>=0.98) over {fit.points} points, {elapsed:.2f}s (<10s)")


def connected_fraction_medians(sigma):
    graph = generate_geometric_graph(20, 0.6, seed=0)
    truth = generate_cluster_model(graph, 3, 2, sigma=sigma, seed=0)
    return [float(np.median([lemma1_trial(graph, truth, n, 50, seed=b) for b in range(5)])) for n in (10, 50, 250)]


def test_criterion_5_connected_tree_trend():
    start = time.perf_counter()
    med = connected_fraction_medians(0.5)
    elapsed = time.perf_counter() - start
    trend = all(a <= b for a, b in zip(med, med[1:]))
    record(5, "cluster-connected tree trend", trend and med[-1] >= 0.99 and elapsed < 120,
           f"median fraction over n=10,50,250: {med} (non-decreasing, >=0.99 at n=250), {elapsed:.1f}s (<120s)")


def test_connected_tree_trend_under_heavy_noise():
    # at sigma=0.5 the fraction is already 1.0 for every n; heavier noise shows the trend is not vacuous
    med = connected_fraction_medians(4.0)
    assert med[0] < med[1] < med[2] and med[2] >= 0.99


def test_criterion_6_selection_consistency():
    start = time.perf_counter()
    rates = []
    for n in (25, 100, 200):
        cfg = ExperimentConfig(K=20, n=n, S=3, d=2, radius=0.6, sigma=0.5, replications=100, arms=("mst_l1",),
                               seed=0, figures=False)
        res = run_experiment(cfg)
        rates.append(sum(r.exact_recovery for r in res.reports) / cfg.replications)
    elapsed = time.perf_counter() - start
    trend = all(a <= b for a, b in zip(rates, rates[1:]))
    record(6, "selection consistency", rates[-1] >= 0.95 and trend and elapsed < 300,
           f"exact recovery over n=25,100,200: {rates} (>=0.95 at n=200, non-decreasing), {elapsed:.1f}s (<300s)")


def cluster_oracle(datasets, truth):
    """Least squares with coefficients shared inside each true cluster and no penalty."""
    beta = np.zeros((len(datasets), truth.d))
    for members in truth.members():
        X = np.vstack([datasets[i].design for i in members])
        y = np.concatenate([datasets[i].responses for i in members])
        beta[members] = np.linalg.lstsq(X, y, rcond=None)[0]
    return beta


def test_criterion_7_asymptotic_normality():
    start = time.perf_counter()
    solver_pass, oracle_pass, pvalues = 0, 0, []
    for batch in range(10):
        cfg = ExperimentConfig(K=10, n=500, S=2, d=2, radius=0.6, sigma=0.5, replications=200, arms=("mst_l1",),
                               seed=batch, figures=False)
        design = build_design(cfg)
        fitted, oracle = [], []
        for r in range(cfg.replications):
            inst = build_instance(cfg, r, design)
            out = run_arms(cfg, inst, r)["mst_l1"]
            fitted.append(normality_sample(out.result.beta_hat, inst.truth, inst.datasets, out.support))
            oracle.append(normality_sample(cluster_oracle(inst.datasets, inst.truth), inst.truth, inst.datasets,
                                           out.support))
        N = cfg.K * cfg.n
        rec = normality_diagnostic(fitted, N, cfg.sigma, alpha=0.01)
        solver_pass += rec.passed
        oracle_pass += normality_diagnostic(oracle, N, cfg.sigma, alpha=0.01).passed
        pvalues.append(round(rec.p_value, 4))
    elapsed = time.perf_counter() - start
    record(7, "asymptotic normality", solver_pass >= 9 and elapsed < 300,
           f"KS passes in {solver_pass}/10 batches (>=9), unpenalized cluster oracle on the same data "
           f"{oracle_pass}/10, p-values {pvalues}, {elapsed:.1f}s (<300s)")


@functools.lru_cache(maxsize=None)
def comparison_sweep():
    """K=50, n=50, 100 replications at r=0.5 and r=0.75, both arms; shared by criteria 8 and 9."""
    start = time.perf_counter()
    sweeps = {}
    for radius in (0.5, 0.75):
        cfg = ExperimentConfig(K=50, n=50, radius=radius, replications=100, seed=0, figures=False)
        sweeps[radius] = run_experiment(cfg)
    return sweeps, time.perf_counter() - start


def paired(result):
    by_arm = {arm: {r.replication: r for r in result.reports if r.arm == arm} for arm in ("mst_l1", "graph_l1")}
    reps = sorted(set(by_arm["mst_l1"]) & set(by_arm["graph_l1"]))
    return [(by_arm["mst_l1"][k], by_arm["graph_l1"][k]) for k in reps]


def test_criterion_8_communication():
    sweeps, elapsed = comparison_sweep()
    structural, details = True, []
    median_ratio = {}
    for radius, res in sweeps.items():
        edges = res.graph.edge_count
        for m, g in paired(res):
            per_round = Fraction(m.scalars_iterate * g.iterate_rounds, g.scalars_iterate * m.iterate_rounds)
            structural &= per_round == Fraction(res.config.K - 1, edges)
        median_ratio[radius] = float(np.median([m.scalars_total / g.scalars_total for m, g in paired(res)]))
        details.append(f"r={radius}: |E|={edges}, median total ratio {median_ratio[radius]:.3f}, "
                       f"{len(paired(res))} paired replications")
    record(8, "communication claim", structural and median_ratio[0.5] <= 0.45 and elapsed < 1200,
           f"per-iteration ratio == (K-1)/|E| in every replication: {structural}; " + "; ".join(details)
           + f"; sweep {elapsed:.0f}s (<1200s)")


def test_criterion_9_accuracy_direction():
    sweeps, _ = comparison_sweep()
    ok, details = True, []
    for radius, res in sweeps.items():
        pairs = paired(res)
        mst = np.median([m.mse for m, _ in pairs])
        graph = np.median([g.mse for _, g in pairs])
        wins = sum(m.mse < g.mse for m, g in pairs)
        ok &= mst < graph and wins >= 80 and len(pairs) == 100
        details.append(f"r={radius}: median MSE {mst:.3e} vs {graph:.3e}, MST lower in {wins}/{len(pairs)}, "
                       f"median reduction {1 - mst / graph:.0%} (reported figure: at least 21%)")
    record(9, "accuracy direction", ok, "; ".join(details))


def test_criterion_10_determinism():
    cfg = ExperimentConfig(K=20, n=30, radius=0.5, replications=4, seed=12345, figures=False)

    def without_wall_time(text):
        rows = list(csv.reader(io.StringIO(text)))
        col = rows[0].index("wall_time_ms")
        return [r[:col] + r[col + 1:] for r in rows]

    first = reports_to_csv(run_experiment(cfg).reports)
    second = reports_to_csv(run_experiment(cfg).reports)
    parallel = reports_to_csv(run_experiment(dataclasses.replace(cfg, workers=2)).reports)
    same = without_wall_time(first) == without_wall_time(second) == without_wall_time(parallel)
    record(10, "determinism", same and len(first.splitlines()) == 9,
           f"re-run and 2-worker run reproduce all {len(first.splitlines()) - 1} rows except wall_time_ms: {same}")
