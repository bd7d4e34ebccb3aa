"""Figures for experiment reports: network/tree layout and per-arm boxplots."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
ARM_LABELS = {"mst_l1": "MST$_s$ $\\ell_1$", "graph_l1": "Graph $\\ell_1$"}
CLUSTER_COLORS = plt.get_cmap("tab10").colors


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_network(graph, tree=None, assignment=None, ax=None, title=None):
    """Network edges dashed, tree edges solid, nodes colored by cluster."""
    if graph.positions is None:
        raise ValueError("graph has no node positions to draw")
    pos = graph.positions
    if ax is None:
        _, ax = plt.subplots(figsize=(4, 4))
    for s, e in graph.edges:
        ax.plot(pos[[s, e], 0], pos[[s, e], 1], ls="--", lw=0.4, color="0.75", zorder=1)
    if tree is not None:
        for s, e in tree.edges:
            ax.plot(pos[[s, e], 0], pos[[s, e], 1], ls="-", lw=1.4, color="0.15", zorder=2)
    colors = ("C0" if assignment is None
              else [CLUSTER_COLORS[int(a) % len(CLUSTER_COLORS)] for a in assignment])
    ax.scatter(pos[:, 0], pos[:, 1], s=28, c=colors, edgecolors="k", linewidths=0.5, zorder=3)
    ax.set_xlim(-0.03, 1.03)
    ax.set_ylim(-0.03, 1.03)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    for spine in ax.spines.values():
        spine.set_visible(False)
    if title:
        ax.set_title(title)
    return ax


def _boxpanel(ax, groups: dict[str, Sequence[float]], title: str, log=False):
    labels = list(groups)
    ax.boxplot([np.asarray(groups[k], float) for k in labels], widths=0.55, showfliers=True,
               medianprops={"color": "C3"}, flierprops={"markersize": 3})
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_title(title)
    if log:
        ax.set_yscale("log")


def plot_arm_boxplots(rows: Sequence[dict], baseline_arm: str, path: Path, label_suffix=lambda row: ""):
    """Four panels: MSE, estimated cluster count, time ratio and communication ratio.

    Ratios divide by the mean of the baseline arm over ``rows`` whose label
    suffix matches the first baseline row (so a multi-run comparison can fix
    one reference setting).
    """
    with plt.rc_context(STYLE):
        base = [r for r in rows if r["arm"] == baseline_arm]
        if base:
            ref_suffix = label_suffix(base[0])
            base = [r for r in base if label_suffix(r) == ref_suffix]
        base_time = np.mean([float(r["wall_time_ms"]) for r in base]) if base else np.nan
        base_comm = np.mean([int(r["scalars_setup"]) + int(r["scalars_iterate"]) for r in base]) if base else np.nan

        groups: dict[str, dict[str, list[float]]] = {"mse": {}, "s_hat": {}, "time": {}, "comm": {}}
        for r in rows:
            key = ARM_LABELS.get(r["arm"], r["arm"]) + label_suffix(r)
            groups["mse"].setdefault(key, []).append(float(r["mse"]))
            groups["s_hat"].setdefault(key, []).append(float(r["s_hat"]))
            groups["time"].setdefault(key, []).append(float(r["wall_time_ms"]) / base_time)
            groups["comm"].setdefault(key, []).append(
                (int(r["scalars_setup"]) + int(r["scalars_iterate"])) / base_comm)

        fig, axes = plt.subplots(1, 4, figsize=(11, 3.1))
        _boxpanel(axes[0], groups["mse"], "MSE of $\\hat\\beta$", log=True)
        _boxpanel(axes[1], groups["s_hat"], "$\\hat S$")
        _boxpanel(axes[2], groups["time"], "computation time ratio")
        _boxpanel(axes[3], groups["comm"], "communication cost ratio")
        return _save(fig, path)


def _report_rows(reports) -> list[dict]:
    return [{"arm": r.arm, "mse": r.mse, "s_hat": r.s_hat, "wall_time_ms": r.wall_time_ms,
             "scalars_setup": r.scalars_setup, "scalars_iterate": r.scalars_iterate,
             "replication": r.replication} for r in reports]


def render_experiment_figures(result, out_dir: Path) -> dict[str, Path]:
    """Boxplots for every arm and, for a fixed design, the network with replication 0's tree."""
    from .experiment import build_instance
    from .graph import build_mst, similarity_weights
    from .local import fit_local_ols

    out_dir = Path(out_dir)
    paths = {"boxplots": plot_arm_boxplots(_report_rows(result.reports), result.config.baseline_arm,
                                           out_dir / "boxplots.png")}
    if result.graph is not None and result.graph.positions is not None:
        inst = build_instance(result.config, 0, (result.graph, result.truth))
        ols = [fit_local_ols(ds, result.config.ridge) for ds in inst.datasets]
        tree = build_mst(inst.graph, similarity_weights(inst.graph, ols))
        with plt.rc_context(STYLE):
            fig, ax = plt.subplots(figsize=(4, 4))
            plot_network(inst.graph, tree, result.truth.assignment, ax,
                         title=f"K={result.config.K}, r={result.config.radius:g}")
            paths["network"] = _save(fig, out_dir / "network.png")
    return paths


def compare_runs(run_dirs: Sequence[str | Path], out_dir: str | Path, baseline_arm: str = "mst_l1") -> dict:
    """Pool several run directories (e.g. one per radius) against the first run's baseline arm.

    Writes ``comparison.csv`` (rows tagged by run) and ``comparison.png``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in run_dirs:
        run = Path(run)
        summary = json.loads((run / "summary.json").read_text())
        radius = summary["environment"]["config"]["radius"]
        with open(run / "replications.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                row["run"] = f"r={radius:g}"
                rows.append(row)
    if not rows:
        raise ValueError("no replication rows found")
    fields = ["run"] + [k for k in rows[0] if k != "run"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    fig_path = plot_arm_boxplots(rows, baseline_arm, out / "comparison.png", label_suffix=lambda r: f"\n{r['run']}")
    return {"csv": out / "comparison.csv", "figure": fig_path}
