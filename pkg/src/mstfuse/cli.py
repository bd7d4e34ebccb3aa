"""Command-line entry point: ``mstfuse run`` and ``mstfuse compare``.

Exit codes: 0 success, 2 configuration error, 3 every replication failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigurationError, MstFuseError
from .experiment import ARMS, load_config, run_experiment, write_outputs
from .graph import read_edge_list

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 2, 3

log = logging.getLogger("mstfuse")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _arms(text: str) -> tuple[str, ...]:
    arms = tuple(a.strip() for a in text.split(",") if a.strip())
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise argparse.ArgumentTypeError(f"arms must be a comma list drawn from {','.join(ARMS)}")
    return arms


def _lambda(text: str):
    return None if text.lower() == "bic" else float(text)


def _tau(text: str):
    return None if text.lower() == "auto" else float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a replicated comparison of the configured arms")
    run.add_argument("--config", type=Path, help="flat key = value config file")
    run.add_argument("--seed", type=_u64)
    run.add_argument("--arms", type=_arms, help="comma list, e.g. mst_l1,graph_l1")
    run.add_argument("--out", help="output directory (default: results)")
    run.add_argument("--workers", type=int)
    run.add_argument("--replications", type=int)
    run.add_argument("-K", "--nodes", dest="K", type=int)
    run.add_argument("-n", "--samples", dest="n", type=int)
    run.add_argument("--radius", type=float)
    run.add_argument("--clusters", dest="S", type=int)
    run.add_argument("--sigma", type=float)
    # suppressed defaults: an explicit "bic"/"auto" (None) must still override the config file
    run.add_argument("--lambda", dest="lam", type=_lambda, metavar="VALUE|bic", default=argparse.SUPPRESS)
    run.add_argument("--tau", type=_tau, metavar="VALUE|auto", default=argparse.SUPPRESS)
    run.add_argument("--ridge", type=float)
    run.add_argument("--edges", type=Path, help="edge-list file replacing the random geometric network")
    run.add_argument("--no-figures", dest="figures", action="store_false", default=None)

    cmp_ = sub.add_parser("compare", help="pool finished runs against the first run's baseline arm")
    cmp_.add_argument("runs", nargs="+", type=Path, help="run directories holding replications.csv")
    cmp_.add_argument("--out", type=Path, required=True)
    cmp_.add_argument("--baseline-arm", default="mst_l1", choices=ARMS)
    return parser


def _cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("seed", "arms", "out", "workers", "replications", "K", "n", "radius", "S", "sigma", "ridge",
                  "figures")}
    graph = None
    if args.edges is not None:
        graph, _ = read_edge_list(args.edges)
        overrides["K"] = graph.node_count
    config = load_config(args.config, **overrides)
    explicit = {k: getattr(args, k) for k in ("lam", "tau") if hasattr(args, k)}
    if explicit:
        config = dataclasses.replace(config, **explicit)

    result = run_experiment(config, graph=graph)
    paths = write_outputs(result)
    for name, path in sorted(paths.items()):
        log.info("wrote %s: %s", name, path)
    if not result.reports:
        print(f"all {config.replications} replications failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    ratios = result.summary["ratios"]["by_arm"]
    for arm, block in result.summary["arms"].items():
        line = (f"{arm}: median mse={block['mse']['p50']:.4g} s_hat={block['s_hat']['p50']:g} "
                f"exact={block['exact_recovery_rate']:.2f}")
        if arm in ratios:
            line += (f" time_ratio={ratios[arm]['wall_time']['p50']:.3g}"
                     f" comm_ratio={ratios[arm]['scalars_total']['p50']:.3g}")
        print(line)
    if result.failures:
        print(f"{len(result.failures)} replication(s) failed; see summary.json", file=sys.stderr)
    print(f"results in {Path(config.out).resolve()}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .plotting import compare_runs

    for run in args.runs:
        if not (run / "replications.csv").is_file() or not (run / "summary.json").is_file():
            raise ConfigurationError(f"{run}: not a finished run directory")
    paths = compare_runs(args.runs, args.out, args.baseline_arm)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except (MstFuseError, OSError) as exc:
        # anything raised before replications start is a problem with the inputs
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
