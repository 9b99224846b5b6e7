"""Command-line driver. Outputs are files under --out-dir; stderr carries
stage-tagged diagnostics and the exit code reports success."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from ..errors import PlumeflowError, StageError
from .pipeline import (
    ExperimentConfig,
    load_config,
    run_pipeline,
    stage_compare,
    stage_correlate,
    stage_eval,
    stage_generate,
    stage_knn,
    stage_mlp,
    stage_pareto,
    stage_profile,
    stage_select,
    sweep_check_interval,
    write_manifest,
)

# dependency order: generate -> profile -> train-mlp -> select -> build-knn
# -> run-adaptive -> analyze-corr / compare
COMMANDS = {
    "generate": [("generate", stage_generate)],
    "profile": [("profile", stage_profile)],
    "train-mlp": [("train-mlp", stage_mlp)],
    "select": [("pareto", stage_pareto), ("select", stage_select)],
    "build-knn": [("build-knn", stage_knn)],
    "run-adaptive": [("run-eval", stage_eval)],
    "analyze-corr": [("analyze-corr", stage_correlate)],
    "compare": [("compare", stage_compare)],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plumeflow",
        description="Surrogate pressure-solver experiment harness",
    )
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--out-dir", help="override the artifact directory")
    parser.add_argument("--threads", type=int, help="worker threads for problems")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, help=f"run the {name} stage")
    sub.add_parser("all", help="run the whole pipeline")
    sweep = sub.add_parser("sweep-interval", help="check-interval sensitivity sweep")
    sweep.add_argument("--intervals", default="5,10,20",
                       help="comma-separated check intervals (each >= 3)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.threads is not None:
        overrides["threads"] = args.threads
    return replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (OSError, json.JSONDecodeError, PlumeflowError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "all":
            run_pipeline(cfg)
        elif args.command == "sweep-interval":
            intervals = [int(v) for v in args.intervals.split(",") if v]
            sweep_check_interval(cfg, intervals)
        else:
            for stage_name, fn in COMMANDS[args.command]:
                try:
                    fn(cfg)
                except StageError:
                    raise
                except Exception as exc:
                    raise StageError(stage_name, str(exc)) from exc
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except PlumeflowError as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
