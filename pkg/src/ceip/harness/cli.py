"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ceip.data import DatasetError
from ceip.harness import pipeline as pl
from ceip.harness.config import VARIANTS, ConfigError, ExperimentConfig, get_variant
from ceip.numerics import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("ceip")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig({})
    overrides = {}
    if getattr(args, "variant", None):
        get_variant(args.variant)
        overrides["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    return cfg.replace(**overrides) if overrides else cfg


def _workspace(args, cfg) -> pl.Workspace:
    ws = pl.Workspace(Path(args.out), resume=args.resume)
    ws.check_experiment(cfg)
    return ws


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    ws = _workspace(args, cfg)
    _, path = pl.stage_data(cfg, ws)
    print(path)
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _load(args)
    ws = _workspace(args, cfg)
    groups = pl.stage_cluster(cfg, ws)
    print(f"{len(groups)} clusters: sizes {[len(g) for g in groups]}")
    return EXIT_OK


def cmd_train_flows(args) -> int:
    cfg = _load(args)
    ws = _workspace(args, cfg)
    v = cfg.variant
    if v.family == "parrot":
        _, path = pl.stage_single_flow(cfg, ws, v.source, v.use_explicit)
        print(path)
    else:
        _, paths = pl.stage_flows(cfg, ws, v.use_explicit)
        if v.use_ts_flow:
            paths = list(paths) + [pl.stage_single_flow(cfg, ws, "ts", v.use_explicit)[1]]
        print("\n".join(map(str, paths)))
    return EXIT_OK


def cmd_train_combo(args) -> int:
    cfg = _load(args)
    ws = _workspace(args, cfg)
    v = cfg.variant
    if v.family != "ceip":
        raise ConfigError(f"variant {v.name} has no combination stage")
    pl.stage_combination(cfg, ws, v.use_explicit, v.use_ts_flow)
    print("combination ready")
    return EXIT_OK


def _print_results(results) -> None:
    for r in results:
        f = r.report.final
        print(f"{r.variant} seed {r.seed}: return {f.mean_return:.3f} +- {f.std_return:.3f}, "
              f"subtasks {f.mean_subtasks:.2f} -> {r.run_dir}")


def cmd_train_rl(args) -> int:
    cfg = _load(args)
    ws = _workspace(args, cfg)
    results = pl.run_many(cfg, ws, [cfg.variant.name], cfg.seeds, args.jobs)
    _print_results(results)
    return EXIT_OK


cmd_pipeline = cmd_train_rl


def cmd_ablate(args) -> int:
    cfg = _load(args)
    names = args.variants or list(VARIANTS)
    for n in names:
        get_variant(n)
    ws = _workspace(args, cfg)
    results = pl.run_many(cfg, ws, names, cfg.seeds, args.jobs)
    rows = pl.summarize(results)
    out = ws.root / "summary.csv"
    pl.write_csv(out, pl.SUMMARY_COLUMNS, rows)
    for r in rows:
        print(f"{r['variant']:<28} {r['mean_return']:9.3f} +- {r['std_return']:.3f}   "
              f"subtasks {r['mean_subtasks']:.2f}")
    print(out)
    return EXIT_OK


def cmd_curves(args) -> int:
    rows = pl.collect_curves(args.runs)
    pl.write_csv(args.out, pl.CURVE_COLUMNS, rows)
    print(f"{len(rows)} rows -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ceip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, fn, helptext, jobs=False):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
        sp.add_argument("--variant", help="variant name, e.g. CEIP+TS+EX+forward")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--resume", action="store_true", help="reuse completed stages and runs in --out")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel (variant, seed) jobs")
        sp.set_defaults(func=fn)
        return sp

    staged("gen-data", cmd_gen_data, "generate demonstration datasets")
    staged("cluster", cmd_cluster, "cluster the task-agnostic demonstrations")
    staged("train-flows", cmd_train_flows, "train the variant's single flows")
    staged("train-combo", cmd_train_combo, "train the coefficient net over frozen flows")
    staged("train-rl", cmd_train_rl, "train and evaluate the variant (builds missing stages)", jobs=True)
    staged("pipeline", cmd_pipeline, "run every stage end to end", jobs=True)
    ab = staged("ablate", cmd_ablate, "run several variants and write summary.csv", jobs=True)
    ab.add_argument("--variants", nargs="+", metavar="NAME", help=f"subset of: {', '.join(VARIANTS)}")

    cv = sub.add_parser("curves", help="merge run reports into a long-form CSV")
    cv.add_argument("runs", nargs="*", type=Path, help="run directories or their parents")
    cv.add_argument("--out", type=Path, required=True, help="output CSV path")
    cv.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, pl.StageError, OSError, DatasetError) as e:
        cause = e.cause if isinstance(e, pl.StageError) else e
        stage = f"[{e.stage}] " if isinstance(e, pl.StageError) else ""
        if isinstance(cause, NumericError):
            print(f"{stage}numeric failure: {cause}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(cause, (OSError, DatasetError)):
            print(f"{stage}I/O error: {cause}", file=sys.stderr)
            return EXIT_IO
        if isinstance(cause, ValueError):
            print(f"{stage}configuration error: {cause}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
