"""Replicated simulation study comparing the tree-penalized and full-graph-penalized estimators.

One replication draws data, fits local OLS, exchanges the estimates over the
network (the ledger's setup bucket), builds the similarity tree, and then runs
each requested arm on identical data and starting points.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .admm import AdmmConfig, SolverResult, run_solver
from .evaluation import DEFAULT_ZERO_TOL, coefficient_mse, extract_clusters, selection_accuracy
from .exceptions import ConfigurationError, MstFuseError, SelectionError
from .graph import EdgeSupport, NetworkGraph, build_mst
from .local import NodeDataset, edge_weight_table, fit_local_ols
from .synthetic import ClusterModel, generate_cluster_model, generate_datasets, generate_geometric_graph
from .transport import CommLedger, RoundTransport

log = logging.getLogger(__name__)

ARMS = ("mst_l1", "graph_l1")
CSV_COLUMNS = ("replication", "arm", "seed", "lambda", "mse", "s_hat", "exact_recovery", "rand_index",
               "iterations", "converged", "wall_time_ms", "scalars_setup", "scalars_iterate", "messages_total")
QUANTILES = {"p10": 10, "p25": 25, "p50": 50, "p75": 75, "p90": 90}
# keys that change where or how fast results are produced but never their values
_RUNTIME_KEYS = ("out", "workers", "figures")


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 50
    n: int = 50
    d: int = 2
    S: int = 3
    radius: float = 0.5
    sigma: float = 0.5
    gamma: float = 1.0
    tau: float | None = None  # None: mean diagonal of the local Gram matrices
    lam: float | None = None  # None: BIC over the grid
    grid_points: int = 20
    grid_min: float = 1e-3  # grid bounds are multiples of sqrt(N)
    grid_max: float = 1e2
    replications: int = 100
    seed: int = 0
    arms: tuple[str, ...] = ARMS
    baseline_arm: str = "mst_l1"
    design: str = "fixed"  # "fixed": one network and clustering, data redrawn; "resample": all redrawn
    coefficient_scheme: str = "default"
    ridge: float = 0.0
    max_iters: int = 10000
    primal_tol: float = 1e-6
    dual_tol: float = 1e-7
    zero_tol: float = DEFAULT_ZERO_TOL
    out: str = "results"
    workers: int = 1
    figures: bool = True

    def __post_init__(self):
        arms = tuple(self.arms)
        object.__setattr__(self, "arms", arms)
        problems = []
        if self.K < 2:
            problems.append("K must be >= 2")
        if self.n < 1 or self.d < 1:
            problems.append("n and d must be positive")
        if not (1 <= self.S <= self.K):
            problems.append("S must lie in 1..K")
        if not (0 < self.radius <= math.sqrt(2)):
            problems.append("radius must lie in (0, sqrt(2)]")
        if self.sigma < 0 or self.gamma <= 0:
            problems.append("sigma must be >= 0 and gamma > 0")
        if self.tau is not None and self.tau <= 0:
            problems.append("tau must be positive")
        if self.lam is not None and self.lam < 0:
            problems.append("lambda must be nonnegative")
        if self.grid_points < 1 or not (0 < self.grid_min <= self.grid_max):
            problems.append("grid needs >= 1 point and 0 < grid_min <= grid_max")
        if self.replications < 1:
            problems.append("replications must be >= 1")
        if not arms or any(a not in ARMS for a in arms) or len(set(arms)) != len(arms):
            problems.append(f"arms must be a nonempty subset of {ARMS}")
        if self.baseline_arm not in ARMS:
            problems.append(f"baseline_arm must be one of {ARMS}")
        if self.design not in ("fixed", "resample"):
            problems.append("design must be 'fixed' or 'resample'")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def lambda_grid(self, N: int) -> np.ndarray:
        root = math.sqrt(N)
        return np.geomspace(self.grid_min * root, self.grid_max * root, self.grid_points)

    def canonical(self) -> dict:
        data = dataclasses.asdict(self)
        data["arms"] = list(self.arms)
        for key in _RUNTIME_KEYS:
            data.pop(key)
        return data

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CONFIG_ALIASES = {"lambda": "lam", "r": "radius", "replication_count": "replications"}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    if name in ("tau", "lam"):
        return None if raw.lower() in ("auto", "bic", "none", "") else float(raw)
    if name == "arms":
        return tuple(a.strip() for a in raw.split(",") if a.strip())
    if name == "figures":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    kind = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}[name]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines (``#`` comments) into ExperimentConfig keyword arguments."""
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split(sep, 1))
        key = _CONFIG_ALIASES.get(key, key)
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError:
            raise ConfigurationError(f"line {lineno}: bad value {value!r} for {key}") from None
    return values


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "arms":
            value = ",".join(value)
        elif value is None:
            value = "auto" if f.name == "tau" else "bic"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def replication_seed(seed: int, replication: int) -> int:
    """64-bit seed identifying one replication's data streams."""
    words = np.random.SeedSequence(entropy=int(seed), spawn_key=(0, int(replication))).generate_state(2, np.uint32)
    return int(words[0]) << 32 | int(words[1])


def auto_tau(datasets: Sequence[NodeDataset]) -> float:
    """Mean diagonal entry of the local Gram matrices; balances the penalty against the data curvature."""
    return float(np.mean([np.trace(ds.gram()) / ds.d for ds in datasets]))


def bic(datasets: Sequence[NodeDataset], beta_hat, s_hat: int) -> float:
    """``N log(RSS/N) + log(N) d S_hat``."""
    N = sum(ds.n for ds in datasets)
    d = datasets[0].d
    rss = sum(float(np.sum((ds.responses - ds.design @ beta_hat[i]) ** 2)) for i, ds in enumerate(datasets))
    return N * math.log(max(rss, np.finfo(float).tiny) / N) + math.log(N) * d * s_hat


@dataclass
class GridPoint:
    lam: float
    bic: float
    s_hat: int
    converged: bool
    iterations: int


@dataclass
class LambdaSelection:
    lam: float
    path: list[GridPoint]


def select_lambda(datasets: Sequence[NodeDataset], support: EdgeSupport, weights, grid: Sequence[float],
                  admm: AdmmConfig, zero_tol: float = DEFAULT_ZERO_TOL, warm_start: bool = True) -> LambdaSelection:
    """Pick the grid value minimizing BIC; ties go to the smaller value.

    The grid is visited in increasing order, each solve warm-started from the
    previous solution. Once every support edge is fused, larger values give the
    same (pooled) solution and are not solved again.
    """
    values = sorted({float(v) for v in grid})
    if not values:
        raise SelectionError("empty lambda grid")
    if len(values) == 1:
        return LambdaSelection(values[0], [])
    path: list[GridPoint] = []
    init = None
    for lam in values:
        if path and path[-1].s_hat == 1 and path[-1].converged:
            prev = path[-1]
            path.append(GridPoint(lam, prev.bic, 1, True, 0))
            continue
        res = run_solver(datasets, support, weights, dataclasses.replace(admm, lam=lam),
                         record_trajectory=False, init=init)
        if warm_start:
            init = (res.beta_hat, res.delta_hat, res.dual_hat)
        part = extract_clusters(res.delta_hat, support, zero_tol)
        path.append(GridPoint(lam, bic(datasets, res.beta_hat, part.cluster_count), part.cluster_count,
                              res.converged, res.iterations))
    usable = [p for p in path if p.converged]
    if not usable:
        raise SelectionError("no grid point converged")
    best = min(usable, key=lambda p: (p.bic, p.lam))
    return LambdaSelection(best.lam, path)


@dataclass
class ReplicationReport:
    replication: int
    arm: str
    seed: int
    lam: float
    mse: float
    s_hat: int
    exact_recovery: bool
    rand_index: float
    iterations: int
    converged: bool
    wall_time_ms: float
    scalars_setup: int
    scalars_iterate: int
    messages_total: int
    support_edges: int = 0
    iterate_rounds: int = 0
    tau: float = 0.0
    intransitive: bool = False

    @property
    def scalars_total(self) -> int:
        return self.scalars_setup + self.scalars_iterate

    def csv_row(self) -> list[str]:
        return [str(self.replication), self.arm, str(self.seed), repr(float(self.lam)), repr(float(self.mse)),
                str(self.s_hat), str(int(self.exact_recovery)), repr(float(self.rand_index)), str(self.iterations),
                str(int(self.converged)), f"{self.wall_time_ms:.3f}", str(self.scalars_setup),
                str(self.scalars_iterate), str(self.messages_total)]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.lam, self.mse, self.rand_index, self.wall_time_ms))


@dataclass
class Instance:
    graph: NetworkGraph
    truth: ClusterModel
    datasets: list[NodeDataset]
    seed: int


def build_design(config: ExperimentConfig, replication: int = 0) -> tuple[NetworkGraph, ClusterModel]:
    key_seed = config.seed if config.design == "fixed" else replication_seed(config.seed, replication)
    graph = generate_geometric_graph(config.K, config.radius, key_seed)
    truth = generate_cluster_model(graph, config.S, config.d, config.coefficient_scheme, config.sigma, key_seed)
    return graph, truth


def build_instance(config: ExperimentConfig, replication: int, design=None) -> Instance:
    graph, truth = design if design is not None else build_design(config, replication)
    rep_seed = replication_seed(config.seed, replication)
    return Instance(graph, truth, generate_datasets(graph, truth, config.n, rep_seed), rep_seed)


def weights_from_inbox(graph: NetworkGraph, ols, received: np.ndarray) -> dict:
    """Similarity weight of each edge as computed by its start node from the estimate it received."""
    half = graph.half_edges
    weights = {}
    for h in range(len(half)):
        i, j = int(half.owner[h]), int(half.other[h])
        if i < j:
            weights[(i, j)] = float(np.linalg.norm(ols[i].coefficients - received[h]))
    return weights


@dataclass
class ArmOutcome:
    report: ReplicationReport
    result: SolverResult
    support: EdgeSupport
    selection: LambdaSelection | None = None


def run_arms(config: ExperimentConfig, instance: Instance, replication: int = 0) -> dict[str, ArmOutcome]:
    """Run every configured arm on one instance; both arms share data, weights rule and start point."""
    graph, datasets = instance.graph, instance.datasets
    ols = [fit_local_ols(ds, config.ridge) for ds in datasets]

    # bootstrap: every node sends its OLS estimate to all network neighbors
    setup = CommLedger()
    boot = RoundTransport(graph, setup, bucket="setup")
    received = boot.exchange(np.stack([o.coefficients for o in ols]))
    boot.shutdown()
    tree = build_mst(graph, weights_from_inbox(graph, ols, received))

    tau = config.tau if config.tau is not None else auto_tau(datasets)
    N = sum(ds.n for ds in datasets)
    base = AdmmConfig(lam=0.0, tau=tau, max_iters=config.max_iters, primal_tol=config.primal_tol,
                      dual_tol=config.dual_tol)
    outcomes = {}
    for arm in config.arms:
        support = tree if arm == "mst_l1" else graph.as_support()
        pi_hat = edge_weight_table(support, ols, config.gamma)
        admm = dataclasses.replace(base, penalty_support="mst" if arm == "mst_l1" else "full_graph")
        selection = None
        if config.lam is None:
            selection = select_lambda(datasets, support, pi_hat, config.lambda_grid(N), admm, config.zero_tol)
            lam = selection.lam
        else:
            lam = config.lam
        ledger = dataclasses.replace(setup, per_round=list(setup.per_round))
        transport = RoundTransport(support, ledger)
        start = time.perf_counter()
        result = run_solver(datasets, support, pi_hat, dataclasses.replace(admm, lam=lam), transport,
                            record_trajectory=False, ridge=config.ridge)
        elapsed = (time.perf_counter() - start) * 1e3
        part = extract_clusters(result.delta_hat, support, config.zero_tol)
        sel = selection_accuracy(part, instance.truth)
        report = ReplicationReport(
            replication=replication, arm=arm, seed=instance.seed, lam=lam,
            mse=coefficient_mse(result.beta_hat, instance.truth), s_hat=sel.s_hat,
            exact_recovery=sel.exact_recovery, rand_index=sel.rand_index, iterations=result.iterations,
            converged=result.converged, wall_time_ms=elapsed, scalars_setup=ledger.setup_scalars,
            scalars_iterate=ledger.iterate_scalars, messages_total=ledger.messages_sent,
            support_edges=support.edge_count, iterate_rounds=ledger.iterate_rounds, tau=tau,
            intransitive=part.intransitive)
        outcomes[arm] = ArmOutcome(report, result, support, selection)
    return outcomes


@dataclass
class ReplicationFailure:
    replication: int
    reason: str


def run_replication(config: ExperimentConfig, replication: int, design=None):
    """Reports for one replication, or a failure record when generation or solving raises."""
    try:
        instance = build_instance(config, replication, design)
        outcomes = run_arms(config, instance, replication)
    except MstFuseError as exc:
        log.warning("replication %d aborted: %s", replication, exc)
        return ReplicationFailure(replication, f"{type(exc).__name__}: {exc}")
    return [outcomes[arm].report for arm in config.arms]


def _replication_task(args):
    config, replication, design = args
    return replication, run_replication(config, replication, design)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[ReplicationReport]
    failures: list[ReplicationFailure]
    summary: dict
    graph: NetworkGraph | None = None
    truth: ClusterModel | None = None


def run_experiment(config: ExperimentConfig, graph: NetworkGraph | None = None) -> ExperimentResult:
    """Run all replications (optionally in worker processes) and aggregate them.

    Results are assembled in replication order, so they do not depend on scheduling.
    A supplied ``graph`` replaces the random geometric network and fixes the design.
    """
    if graph is not None:
        if graph.node_count != config.K:
            raise ConfigurationError(f"graph has {graph.node_count} nodes but K={config.K}")
        truth = generate_cluster_model(graph, config.S, config.d, config.coefficient_scheme, config.sigma,
                                       config.seed)
        design = (graph, truth)
    else:
        design = build_design(config) if config.design == "fixed" else None
    tasks = [(config, r, design) for r in range(config.replications)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = dict(pool.map(_replication_task, tasks))
    else:
        results = dict(map(_replication_task, tasks))
    reports, failures = [], []
    for r in range(config.replications):
        out = results[r]
        if isinstance(out, ReplicationFailure):
            failures.append(out)
        else:
            reports.extend(out)
    graph, truth = design if design is not None else (None, None)
    return ExperimentResult(config, reports, failures, summarize(config, reports, failures, graph), graph, truth)


def _quantiles(values) -> dict:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {k: None for k in QUANTILES}
    return {k: float(np.percentile(arr, q)) for k, q in QUANTILES.items()}


def summarize(config: ExperimentConfig, reports: Sequence[ReplicationReport],
              failures: Sequence[ReplicationFailure] = (), graph: NetworkGraph | None = None) -> dict:
    """Per-arm quantiles, ratios against the baseline arm's mean, and run metadata."""
    by_arm = {arm: [r for r in reports if r.arm == arm] for arm in config.arms}
    arms = {}
    for arm, rows in by_arm.items():
        arms[arm] = {
            "replications": len(rows),
            "mse": _quantiles([r.mse for r in rows]),
            "s_hat": _quantiles([r.s_hat for r in rows]),
            "wall_time_ms": _quantiles([r.wall_time_ms for r in rows]),
            "scalars_total": _quantiles([r.scalars_total for r in rows]),
            "scalars_iterate": _quantiles([r.scalars_iterate for r in rows]),
            "iterations": _quantiles([r.iterations for r in rows]),
            "exact_recovery_rate": float(np.mean([r.exact_recovery for r in rows])) if rows else None,
            "rand_index_mean": float(np.mean([r.rand_index for r in rows])) if rows else None,
            "converged_rate": float(np.mean([r.converged for r in rows])) if rows else None,
            "support_edges": rows[0].support_edges if rows else None,
        }

    ratios = {}
    base_rows = by_arm.get(config.baseline_arm, [])
    if base_rows:
        base_time = float(np.mean([r.wall_time_ms for r in base_rows]))
        base_comm = float(np.mean([r.scalars_total for r in base_rows]))
        base_mse = {r.replication: r.mse for r in base_rows}
        for arm, rows in by_arm.items():
            paired = [(base_mse[r.replication], r.mse) for r in rows if r.replication in base_mse]
            per_round = [r.scalars_iterate / r.iterate_rounds for r in rows if r.iterate_rounds]
            base_round = [r.scalars_iterate / r.iterate_rounds for r in base_rows if r.iterate_rounds]
            ratios[arm] = {
                "wall_time": _quantiles([r.wall_time_ms / base_time for r in rows]) if base_time > 0 else None,
                "scalars_total": _quantiles([r.scalars_total / base_comm for r in rows]) if base_comm > 0 else None,
                "scalars_per_round": (float(np.mean(per_round)) / float(np.mean(base_round))
                                      if per_round and base_round else None),
                "baseline_lower_mse_count": int(sum(b < a for b, a in paired)),
                "mse_reduction_by_baseline": (float(1 - np.median([b for b, _ in paired])
                                                    / np.median([a for _, a in paired]))
                                              if paired and np.median([a for _, a in paired]) > 0 else None),
            }

    return {
        "arms": arms,
        "ratios": {"baseline_arm": config.baseline_arm, "by_arm": ratios},
        "attrition": {"failed": len(failures), "reasons": [f"{f.replication}: {f.reason}" for f in failures]},
        "design": {
            "network_edges": graph.edge_count if graph is not None else None,
            "tree_edges": config.K - 1,
            "mse_definition": "sum_i ||beta_hat_i - beta_true_i||^2 / (K * d)",
            "covariates": "iid standard normal",
            "lambda": "fixed" if config.lam is not None else "BIC over log-spaced grid times sqrt(N)",
            "tau": "configured" if config.tau is not None else "mean diagonal of local Gram matrices",
        },
        "environment": {
            "package_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config_hash": config.config_hash(),
            "config": config.canonical(),
        },
    }


def reports_to_csv(reports: Sequence[ReplicationReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_outputs(result: ExperimentResult, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write ``replications.csv``, ``summary.json``, ``config.txt`` and, if enabled, figures."""
    out = Path(out_dir if out_dir is not None else result.config.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "replications.csv",
        "summary": out / "summary.json",
        "config": out / "config.txt",
    }
    paths["csv"].write_text(reports_to_csv(result.reports))
    paths["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    paths["config"].write_text(dump_config(result.config))
    if result.config.figures and result.reports:
        from .plotting import render_experiment_figures

        paths.update(render_experiment_figures(result, out))
    return paths
