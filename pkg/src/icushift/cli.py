"""Command-line interface.

Subcommands: generate (synthetic cohorts to episode files), train (the
transfer protocol), grid (validation-only hyperparameter search), analyze
(frequency + distribution plot data), report (benchmark tables).

Configuration comes from an optional `key = value` file plus repeatable
`--set key=value` overrides; `--help` on a subcommand lists every flag.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .cohort import default_profiles, generate_cohort
from .episodes_io import load_profile, read_episodes, save_profile, write_episodes
from .errors import (
    EmptyCohort,
    IcushiftError,
    InvalidProfile,
    IoFailure,
    MalformedFile,
    NoResults,
    UsageError,
)
from .experiment import (
    OUTPUT_DIR_ENV,
    ExperimentConfig,
    analyze_cohorts,
    grid_search,
    report_emit,
    run_experiment,
)

_DATA_ERRORS = (MalformedFile, IoFailure, InvalidProfile, EmptyCohort, NoResults)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, "results")


def _build_parser() -> _Parser:
    parser = _Parser(prog="icushift", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="{generate,train,grid,analyze,report}")

    def add_config_flags(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--task", choices=("ihm", "decompensation", "los", "phenotyping"))
        p.add_argument("--method", choices=("baseline", "ewc", "replay", "adjusted_replay", "combined"))
        p.add_argument("--region", help="target profile; sources become mimic3,<region>")
        p.add_argument("--seeds", type=int, help="number of complete training iterations")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or ./results)")

    gen = sub.add_parser("generate", help="write synthetic cohorts in the episode-file layout")
    gen.add_argument("--profile", action="append", default=[],
                     help="built-in profile name or profile file (repeatable; default: all built-ins)")
    gen.add_argument("--episodes", type=int, help="override the profile cohort size")
    gen.add_argument("--shift", type=float, default=1.0, help="domain-shift coefficient")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=None)
    gen.add_argument("--write-profiles", action="store_true",
                     help="also write each profile as a key = value file")

    train = sub.add_parser("train", help="run the two-source transfer protocol")
    add_config_flags(train)

    grid = sub.add_parser("grid", help="grid-search epochs and importance on validation sets")
    add_config_flags(grid)
    grid.add_argument("--epochs-grid", help="comma-separated epochs (default: task rule)")
    grid.add_argument("--importance-grid", help="comma-separated importances (default: task rule)")

    analyze = sub.add_parser("analyze", help="frequency table and distribution plot data")
    analyze.add_argument("--data", action="append", default=[],
                         help="episode directory written by generate (repeatable)")
    analyze.add_argument("--profile", action="append", default=[],
                         help="generate a cohort from this profile instead (repeatable)")
    analyze.add_argument("--episodes", type=int, help="cohort size for --profile")
    analyze.add_argument("--shift", type=float, default=1.0)
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--out", default=None)

    report = sub.add_parser("report", help="benchmark tables from results directories")
    report.add_argument("--results", required=True, help="directory tree holding results.json files")
    report.add_argument("--out", default=None)
    return parser


def _parse_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config file {path}: {exc}") from exc
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFile(f"{path}:{line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


_BOOLEANS = {"true": True, "false": False, "1": True, "0": False}


def _coerce(name: str, value: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise UsageError(f"unknown config key {name!r}")
    if name == "sources":
        return tuple(part.strip() for part in value.split(",") if part.strip())
    if name == "sample_cap":
        if value.lower() in ("none", "off"):
            return None
        return value if value == "auto" else int(value)
    if name in ("seeds", "base_seed", "epochs", "batch_size", "hidden_width",
                "buffer_capacity", "cohort_size", "eval_batch_size"):
        return None if value.lower() == "none" else int(value)
    if name in ("learning_rate", "dropout_rate", "importance", "shift"):
        return None if value.lower() == "none" else float(value)
    if value.lower() in _BOOLEANS:
        return _BOOLEANS[value.lower()]
    return value


def build_experiment_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        for key, value in _parse_config_file(args.config).items():
            values[key] = _coerce(key, value)
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value.strip())
    if args.task:
        values["task"] = args.task
    if args.method:
        values["method"] = args.method
    if args.region:
        values["sources"] = ("mimic3", args.region)
    if args.seeds is not None:
        values["seeds"] = args.seeds
    if args.seed is not None:
        values["base_seed"] = args.seed
    if args.out:
        values["out_dir"] = args.out
    return ExperimentConfig(**values)


def _profiles_from_args(names, shift, episodes):
    chosen = {}
    builtin = default_profiles(shift=shift)
    for name in names or list(builtin):
        if name in builtin:
            profile = builtin[name]
        elif Path(name).is_file():
            profile = load_profile(name)
            profile.shift = shift
        else:
            raise InvalidProfile(f"{name!r} is neither a built-in profile nor a profile file")
        if episodes is not None:
            profile.cohort_size = episodes
        chosen[profile.name] = profile
    return chosen


def _cmd_generate(args) -> int:
    out = Path(args.out or _default_out())
    profiles = _profiles_from_args(args.profile, args.shift, args.episodes)
    for name, profile in sorted(profiles.items()):
        cohort = generate_cohort(profile, seed=args.seed)
        target = out / name
        write_episodes(cohort, target)
        print(f"wrote {len(cohort)} episodes to {target}")
        if args.write_profiles:
            save_profile(profile, out / f"{name}.profile")
    return 0


def _cmd_train(args) -> int:
    config = build_experiment_config(args)
    record = run_experiment(config, out_dir=args.out or config.out_dir or _default_out())
    final = record.aggregate["after_source_2"]["psa"]
    summary = ", ".join(f"{m}={v['mean']:.3f}" for m, v in sorted(final.items()))
    print(f"[{record.digest}] {config.task}/{config.method} final PSA: {summary}")
    return 0


def _cmd_grid(args) -> int:
    config = build_experiment_config(args)
    epochs_grid = (
        [int(v) for v in args.epochs_grid.split(",")] if args.epochs_grid else None
    )
    importance_grid = (
        [float(v) for v in args.importance_grid.split(",")] if args.importance_grid else None
    )
    result = grid_search(config, epochs_grid=epochs_grid, importance_grid=importance_grid)
    out = Path(args.out or config.out_dir or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    best = result["best"]
    print(
        f"best cell: importance={best['importance']} epochs={best['epochs']} "
        f"validation PSA {best['validation_psa_mean']:.4f}"
    )
    return 0


def _cmd_analyze(args) -> int:
    cohorts = {}
    for directory in args.data:
        cohort = read_episodes(directory, drop_unknown_region=True)
        if not cohort:
            raise EmptyCohort(f"no episodes in {directory}")
        cohorts[cohort[0].region] = cohort
    if args.profile or not cohorts:
        for name, profile in sorted(_profiles_from_args(args.profile, args.shift, args.episodes).items()):
            cohorts[name] = generate_cohort(profile, seed=args.seed)
    out = Path(args.out or _default_out()) / "analysis"
    analyze_cohorts(cohorts, out)
    print(f"wrote frequency table and distribution data for {len(cohorts)} cohorts to {out}")
    return 0


def _cmd_report(args) -> int:
    written = report_emit(args.results, out_dir=args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "grid": _cmd_grid,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except IcushiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
