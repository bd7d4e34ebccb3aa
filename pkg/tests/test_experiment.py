import csv
import dataclasses
import io
import json

import numpy as np
import pytest

from mstfuse.admm import AdmmConfig
from mstfuse.exceptions import ConfigurationError, SelectionError
from mstfuse.experiment import (CSV_COLUMNS, ExperimentConfig, bic, build_design, build_instance, dump_config,
                                load_config, parse_config_text, read_reports_csv, reports_to_csv, run_arms,
                                run_experiment, select_lambda, write_outputs)
from mstfuse.graph import build_mst, similarity_weights
from mstfuse.local import NodeDataset, edge_weight_table, fit_local_ols

from conftest import path_tree, random_datasets

TINY = dict(K=8, n=20, S=2, radius=0.7, replications=2, seed=3, figures=False)


def strip_wall_time(text):
    rows = list(csv.reader(io.StringIO(text)))
    col = rows[0].index("wall_time_ms")
    return [r[:col] + r[col + 1:] for r in rows]


# ---- lambda selection ----------------------------------------------------------------------------

def two_cluster_instance(sigma):
    rng = np.random.default_rng(8)
    truth = np.repeat([[1.0, 1.0], [-1.0, 2.0]], 3, axis=0)
    datasets = random_datasets(rng, 6, 30, 2, beta=truth, sigma=sigma)
    tree = path_tree(6)
    return datasets, tree, edge_weight_table(tree, [fit_local_ols(ds) for ds in datasets])


def test_single_point_grid():
    datasets, tree, w = two_cluster_instance(0.5)
    assert select_lambda(datasets, tree, w, [0.37], AdmmConfig(tau=30.0)).lam == 0.37


def test_nearly_noiseless_selection_recovers_clusters():
    from mstfuse.evaluation import extract_clusters
    from mstfuse.admm import run_solver

    datasets, tree, w = two_cluster_instance(1e-3)
    grid = np.geomspace(1e-3, 1e3, 13) * np.sqrt(180)
    admm = AdmmConfig(tau=30.0, primal_tol=1e-9, dual_tol=1e-10)
    sel = select_lambda(datasets, tree, w, grid, admm)
    # the sweep covers both under- and over-fusion
    assert min(p.s_hat for p in sel.path) == 1
    res = run_solver(datasets, tree, w, dataclasses.replace(admm, lam=sel.lam))
    assert extract_clusters(res.delta_hat, tree).cluster_count == 2


def test_grid_order_does_not_matter():
    datasets, tree, w = two_cluster_instance(0.5)
    grid = list(np.geomspace(0.1, 300, 8))
    admm = AdmmConfig(tau=30.0)
    a = select_lambda(datasets, tree, w, grid, admm)
    b = select_lambda(datasets, tree, w, grid[::-1], admm)
    c = select_lambda(datasets, tree, w, [grid[i] for i in (3, 0, 7, 5, 1, 6, 2, 4)], admm)
    assert a.lam == b.lam == c.lam


def test_selection_error_when_nothing_converges():
    datasets, tree, w = two_cluster_instance(0.5)
    with pytest.raises(SelectionError):
        select_lambda(datasets, tree, w, [1.0, 2.0], AdmmConfig(tau=1.0, max_iters=1))


def test_bic_formula():
    datasets = [NodeDataset(np.eye(2), [1.0, 2.0], 0), NodeDataset(np.eye(2), [0.0, 0.0], 1)]
    beta = np.array([[0.0, 2.0], [0.0, 0.0]])
    N = 4
    assert bic(datasets, beta, 2) == pytest.approx(N * np.log(1.0 / N) + np.log(N) * 2 * 2)


# ---- configuration -------------------------------------------------------------------------------

def test_parse_config_text():
    text = """
    # comment
    K = 12
    r: 0.6          # alias
    lambda = bic
    tau = 4.5
    arms = mst_l1
    figures = no
    """
    values = parse_config_text(text)
    assert values == {"K": 12, "radius": 0.6, "lam": None, "tau": 4.5, "arms": ("mst_l1",), "figures": False}
    with pytest.raises(ConfigurationError, match="unknown key"):
        parse_config_text("bogus = 1")
    with pytest.raises(ConfigurationError, match="bad value"):
        parse_config_text("K = many")
    with pytest.raises(ConfigurationError):
        parse_config_text("K 12")


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = ExperimentConfig(K=9, lam=2.5, arms=("graph_l1",), seed=2 ** 64 - 1)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path, K=11, seed=None).K == 11


def test_config_validation():
    for bad in (dict(replications=0), dict(arms=("foo",)), dict(arms=()), dict(radius=0), dict(S=0),
                dict(seed=-1), dict(seed=2 ** 64), dict(grid_min=0), dict(design="x"), dict(workers=0)):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(**bad)


def test_config_hash_ignores_runtime_keys():
    a = ExperimentConfig(out="x", workers=4, figures=False)
    b = ExperimentConfig(out="y", workers=1)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig(seed=1).config_hash()
    assert len(a.config_hash()) == 16


def test_lambda_grid_bounds():
    grid = ExperimentConfig().lambda_grid(2500)
    assert len(grid) == 20 and grid[0] == pytest.approx(0.05) and grid[-1] == pytest.approx(5000)
    assert np.all(np.diff(grid) > 0)


# ---- experiment runs ----------------------------------------------------------------------------

def test_one_replication_two_rows_sharing_seed():
    res = run_experiment(ExperimentConfig(**{**TINY, "replications": 1}))
    assert [r.arm for r in res.reports] == ["mst_l1", "graph_l1"]
    assert res.reports[0].seed == res.reports[1].seed
    assert all(r.is_finite() for r in res.reports)


def test_csv_schema(tmp_path):
    res = run_experiment(ExperimentConfig(**TINY))
    text = reports_to_csv(res.reports)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    paths = write_outputs(res, tmp_path)
    rows = read_reports_csv(paths["csv"])
    assert len(rows) == 4 and list(rows[0]) == list(CSV_COLUMNS)
    summary = json.loads(paths["summary"].read_text())
    for arm in ("mst_l1", "graph_l1"):
        for metric in ("mse", "s_hat", "wall_time_ms", "scalars_total"):
            assert set(summary["arms"][arm][metric]) == {"p10", "p25", "p50", "p75", "p90"}
    assert summary["ratios"]["baseline_arm"] == "mst_l1"
    assert summary["environment"]["config_hash"] == res.config.config_hash()
    assert load_config(paths["config"]) == res.config


def test_reports_are_deterministic():
    cfg = ExperimentConfig(**TINY)
    a = reports_to_csv(run_experiment(cfg).reports)
    b = reports_to_csv(run_experiment(cfg).reports)
    assert strip_wall_time(a) == strip_wall_time(b)


def test_workers_do_not_change_results():
    cfg = ExperimentConfig(**{**TINY, "replications": 3})
    serial = reports_to_csv(run_experiment(cfg).reports)
    parallel = reports_to_csv(run_experiment(dataclasses.replace(cfg, workers=2)).reports)
    assert strip_wall_time(serial) == strip_wall_time(parallel)


def test_arms_share_data_and_structural_ratio():
    cfg = ExperimentConfig(**{**TINY, "lam": 1.0})
    graph, truth = build_design(cfg)
    inst = build_instance(cfg, 0, (graph, truth))
    out = run_arms(cfg, inst)
    mst, full = out["mst_l1"].report, out["graph_l1"].report
    assert mst.scalars_setup == full.scalars_setup == 2 * graph.edge_count * cfg.d
    per_round = (mst.scalars_iterate / mst.iterate_rounds) / (full.scalars_iterate / full.iterate_rounds)
    assert per_round == (cfg.K - 1) / graph.edge_count
    # the tree used by the mst arm is the similarity tree of the shared local fits
    ols = [fit_local_ols(ds) for ds in inst.datasets]
    assert out["mst_l1"].support == build_mst(graph, similarity_weights(graph, ols))


def test_resampled_design_changes_network():
    cfg = ExperimentConfig(**{**TINY, "design": "resample"})
    assert build_design(cfg, 0)[0] != build_design(cfg, 1)[0]
    assert run_experiment(cfg).graph is None


def test_failed_replications_are_reported():
    cfg = ExperimentConfig(**{**TINY, "n": 1})  # n < d: every local fit is singular
    res = run_experiment(cfg)
    assert res.reports == [] and len(res.failures) == 2
    assert res.summary["attrition"]["failed"] == 2
    assert "EstimationError" in res.failures[0].reason


def test_custom_graph(tmp_path):
    from mstfuse.graph import NetworkGraph

    g = NetworkGraph(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)])
    res = run_experiment(ExperimentConfig(**{**TINY, "K": 6}), graph=g)
    assert res.graph == g and res.summary["design"]["network_edges"] == 7
    with pytest.raises(ConfigurationError):
        run_experiment(ExperimentConfig(**TINY), graph=g)
