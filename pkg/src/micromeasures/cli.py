"""Command-line entry point: fit, communities, simulate, compare, generate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .communities import build_graph, louvain
from .config import ConfigError, load_config
from .epidemic import read_populations, write_populations
from .mobility import ModelKind, compare_models, fit, infer_homes, load_model, save_model
from .pipeline import StageError, compare_strategies, derive_seed, rerun_manifest, run_scenario, stage
from .synthetic import planted_commuter_model
from .trace import (SECONDS_PER_DAY, filter_users, generate_trace, parse_trace, read_subpref_map,
                    split_train_test, write_subpref_map, write_trace)


def _observation_days(trace, days):
    if days is not None:
        return days
    span = int(trace.timestamp.max() - trace.timestamp.min()) if len(trace) else 0
    return max(1, -(-span // SECONDS_PER_DAY))


def cmd_fit(args) -> int:
    with stage("trace"):
        sp_map = read_subpref_map(args.subpref_map, args.antennas) if args.subpref_map else None
        trace = parse_trace(args.trace, args.antennas, sp_map=sp_map)
        if trace.malformed:
            print(f"skipped {trace.malformed} malformed line(s)", file=sys.stderr)
        trace = filter_users(trace, _observation_days(trace, args.days))
        if not len(trace):
            raise ValueError("no user survives the activity filter")
    with stage("model"):
        kind = ModelKind(args.kind)
        if args.evaluate:
            train, test = split_train_test(trace, args.test_fraction, args.seed)
            kinds = [k for k in ModelKind if k is not ModelKind.SUBPREF_TIME or sp_map is not None]
            reports = compare_models(train, test, args.alpha, kinds)
            table = pd.DataFrame([{"model": k.value, "avg_loglik": r.avg_loglik, "n_test": r.n_test}
                                  for k, r in reports.items()])
            print(table.to_csv(index=False, lineterminator="\n"), end="")
        homes = infer_homes(trace, sp_map)
        model = fit(trace, homes, kind, args.alpha, sp_map=sp_map)
    with stage("output"):
        save_model(model, args.out)
    print(f"wrote {args.out} ({kind.value}, {trace.n_users} users, {len(trace)} records)", file=sys.stderr)
    return 0


def cmd_communities(args) -> int:
    with stage("model"):
        model = load_model(args.model)
    with stage("population"):
        populations = read_populations(args.population, model.n_antennas)
    with stage("communities"):
        graph = build_graph(model, populations, args.steps_per_day, args.threshold)
        result = louvain(graph, derive_seed(args.seed, 0, "louvain"), args.resolution)
    with stage("output"):
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "communities.csv")
        graph.write_csv(out / "graph.csv")
    print(f"{result.n_communities} communities, modularity {result.modularity:.6f}")
    return 0


def cmd_simulate(args) -> int:
    if args.manifest:
        if not args.output:
            raise StageError("config", "--output is required with --manifest")
        manifest, changed = rerun_manifest(args.manifest, args.output, args.workers)
        if changed:
            print("outputs differ from the manifest: " + ", ".join(changed), file=sys.stderr)
            return 1
        print(f"reproduced {len(manifest.outputs)} output file(s) byte for byte")
        return 0
    cfg = load_config(args.config)
    cells = cfg.expand_cells()
    if len(cells) > 1:
        raise StageError("config", "config defines several cells; use 'compare'")
    manifest = run_scenario(cells[0], args.output, args.workers)
    print(Path(args.output or cfg.resolve(cfg.output)) / "metrics.txt")
    return 0 if manifest else 1


def cmd_compare(args) -> int:
    cfgs = []
    for path in args.config:
        cfgs += load_config(path).expand_cells()
    compare_strategies(cfgs, args.output, args.workers)
    out = Path(args.output) if args.output else cfgs[0].resolve(cfgs[0].output)
    print(out / "comparison.csv")
    return 0


def cmd_generate(args) -> int:
    with stage("generate"):
        model, sp_map = planted_commuter_model(args.antennas, args.subprefs, args.seed)
        trace, homes = generate_trace(model, args.users, args.days, args.calls_per_day, args.seed)
    with stage("output"):
        write_trace(trace, args.out)
        if args.subpref_out:
            write_subpref_map(sp_map, args.subpref_out)
        if args.population_out:
            counts = np.bincount(homes, minlength=args.antennas) * args.people_per_user
            write_populations(counts, args.population_out)
    print(f"wrote {len(trace)} records for {args.users} users to {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micromeasures", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="learn a mobility model from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--antennas", type=int, required=True, help="number of antennas")
    p.add_argument("--subpref-map")
    p.add_argument("--days", type=float, help="observation window in days (default: trace span)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--kind", default=ModelKind.HOME_ANTENNA_TIME.value, choices=[k.value for k in ModelKind])
    p.add_argument("--evaluate", action="store_true", help="print held-out log-likelihood of every model kind")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file (.npz)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("communities", help="mobility graph and Louvain partition")
    p.add_argument("--model", required=True)
    p.add_argument("--population", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--steps-per-day", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_communities)

    p = sub.add_parser("simulate", help="run one scenario ensemble")
    p.add_argument("config", nargs="?")
    p.add_argument("--manifest", help="rerun a previous scenario and check its outputs")
    p.add_argument("--output")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run strategy cells with common random numbers")
    p.add_argument("config", nargs="+")
    p.add_argument("--output")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("generate", help="synthetic trace from a planted commuter model")
    p.add_argument("--out", required=True)
    p.add_argument("--antennas", type=int, default=50)
    p.add_argument("--subprefs", type=int, default=5)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--days", type=int, default=14)
    p.add_argument("--calls-per-day", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subpref-out")
    p.add_argument("--population-out", help="also write populations proportional to planted homes")
    p.add_argument("--people-per-user", type=int, default=100)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate" and not args.config and not args.manifest:
        print("error [config]: give a config file or --manifest", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error [config]: {problem}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
