"""Two-source transfer experiments: configuration, protocol, grid search, reports.

A run trains on the first source, scores both test sets (the second
source's score before any training on it is its forecasting baseline),
folds the source into the strategy state, trains on the second source
with the configured mitigation method, scores both test sets again, and
reports the per-source average after each stage.  Several seeds repeat
the whole cycle; aggregates carry mean and standard deviation over
exactly the configured seed count.

Test splits are touched exactly twice per seed, never during training or
grid search; an access counter on the data bundle enforces this in the
test suite.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .cohort import DEFAULT_SCHEMA, default_profiles, distribution_summary, generate_cohort, measurement_frequency
from .episodes_io import load_profile, read_episodes
from .errors import InvalidProfile, IoFailure, NoResults, UsageError
from .metrics import PRIMARY_METRIC, MetricsReport, format_mean_std, psa
from .models import SequenceModel, SequenceModelConfig
from .pipeline import Normalizer, apply_exclusions, build_task_samples, discretize_episode, make_splits
from .strategies import make_strategy
from .training import TrainConfig, evaluate, task_loss, train_on_source

# Protocol constants: buffer capacity, anchor importance, training epochs
# per task, plus the model shapes.  Buffer/importance/epochs follow the
# published benchmark configuration; hidden widths are desk-scale defaults.
TASK_DEFAULTS = {
    "ihm": {
        "buffer_capacity": 500, "importance": 6.0, "epochs": 4,
        "hidden_width": 16, "num_layers": 2, "bidirectional": True,
        "head_mode": "last_step", "head_activation": "sigmoid", "output_width": 1,
    },
    "phenotyping": {
        "buffer_capacity": 500, "importance": 4.0, "epochs": 6,
        "hidden_width": 256, "num_layers": 1, "bidirectional": True,
        "head_mode": "last_step", "head_activation": "sigmoid", "output_width": 25,
    },
    "decompensation": {
        "buffer_capacity": 3500, "importance": 6.0, "epochs": 1,
        "hidden_width": 64, "num_layers": 1, "bidirectional": False,
        "head_mode": "per_step", "head_activation": "sigmoid", "output_width": 1,
    },
    "los": {
        "buffer_capacity": 3500, "importance": 6.0, "epochs": 1,
        "hidden_width": 64, "num_layers": 1, "bidirectional": False,
        "head_mode": "per_step", "head_activation": "softmax", "output_width": 10,
    },
}

# Per-step tasks budget their per-hour samples by region.
REGION_SAMPLE_CAPS = {
    "mimic3": 100_000, "south": 100_000, "midwest": 100_000,
    "west": 50_000, "northeast": 25_000,
}
PER_STEP_TASKS = ("decompensation", "los")

METHODS = ("baseline", "ewc", "replay", "adjusted_replay", "combined")
EPOCHS_GRID = (2, 4, 6, 8, 10)
IMPORTANCE_GRID = (2.0, 4.0, 6.0, 8.0)

OUTPUT_DIR_ENV = "ICUSHIFT_OUT"


@dataclass
class ExperimentConfig:
    task: str = "ihm"
    method: str = "baseline"
    sources: tuple = ("mimic3", "south")
    seeds: int = 5
    base_seed: int = 0
    epochs: int | None = None
    batch_size: int = 8
    learning_rate: float = 1e-3
    hidden_width: int | None = None
    dropout_rate: float = 0.3
    buffer_capacity: int | None = None
    importance: float | None = None
    fisher_mode: str = "per_sample"
    cohort_size: int | None = None
    shift: float = 1.0
    sample_cap: object = "auto"  # "auto" | None | int
    data_dir: str | None = None
    out_dir: str | None = None
    mad_units: str = "class"
    eval_batch_size: int = 64

    def resolved(self) -> dict:
        if self.task not in TASK_DEFAULTS:
            raise UsageError(f"unknown task {self.task!r}")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if self.seeds < 1:
            raise UsageError("seeds must be >= 1")
        if len(self.sources) < 2:
            raise UsageError("need at least two sources for a transfer run")
        defaults = TASK_DEFAULTS[self.task]
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["sources"] = list(self.sources)
        for key in ("epochs", "buffer_capacity", "importance", "hidden_width"):
            if out[key] is None:
                out[key] = defaults[key]
        caps = {}
        for source in self.sources:
            if self.sample_cap == "auto":
                caps[source] = (
                    REGION_SAMPLE_CAPS.get(source) if self.task in PER_STEP_TASKS else None
                )
            else:
                caps[source] = self.sample_cap
        out["sample_cap"] = caps
        out["model"] = {
            "input_width": DEFAULT_SCHEMA.total_width,
            "hidden_width": out["hidden_width"],
            "num_layers": defaults["num_layers"],
            "bidirectional": defaults["bidirectional"],
            "dropout_rate": self.dropout_rate,
            "output_width": defaults["output_width"],
            "head_mode": defaults["head_mode"],
            "head_activation": defaults["head_activation"],
        }
        return out

    def digest(self) -> str:
        resolved = self.resolved()
        resolved.pop("out_dir")  # where results land does not change what they are
        blob = json.dumps(resolved, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- data preparation ----------------------------------------------------------


class SourceData:
    """Train/validation/test task samples for one source, with a test-read counter."""

    def __init__(self, name, train, validation, test, episodes_by_id):
        self.name = name
        self.train = train
        self.validation = validation
        self._test = test
        self.test_reads = 0
        self.episodes_by_id = episodes_by_id

    @property
    def test(self):
        self.test_reads += 1
        return self._test


def _per_source_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0xDA7A]).generate_state(1)[0])


def _load_source_episodes(resolved, source, seed):
    if resolved["data_dir"] is not None:
        directory = Path(resolved["data_dir"]) / source
        return read_episodes(directory, drop_unknown_region=True)
    profiles = default_profiles(shift=resolved["shift"])
    if source in profiles:
        profile = profiles[source]
    elif Path(source).is_file():
        profile = load_profile(source)
        profile.shift = resolved["shift"]
    else:
        raise InvalidProfile(f"{source!r} is neither a built-in profile nor a profile file")
    if resolved["cohort_size"] is not None:
        profile.cohort_size = resolved["cohort_size"]
    return generate_cohort(profile, seed=seed)


def prepare_data(config: ExperimentConfig, seed: int):
    """Cohorts, splits, normalization, and task extraction for every source.

    The normalizer is fitted on the first source's training split only.
    """
    resolved = config.resolved()
    task = resolved["task"]
    sources = []
    normalizer = None
    for index, source in enumerate(resolved["sources"]):
        episodes = _load_source_episodes(resolved, source, seed)
        eligible = apply_exclusions(episodes, task)
        if not eligible:
            raise InvalidProfile(f"source {source}: no episodes pass the {task} exclusions")
        split = make_splits(eligible, seed=_per_source_seed(seed, index))
        parts = {name: split.select(eligible, name) for name in ("train", "validation", "test")}
        if normalizer is None:
            horizon = 48 if task == "ihm" else None
            raw = [discretize_episode(ep, DEFAULT_SCHEMA, horizon) for ep in parts["train"]]
            normalizer = Normalizer(DEFAULT_SCHEMA).fit(raw)
        built = {
            name: build_task_samples(eps, task, DEFAULT_SCHEMA, normalizer, source_id=source)
            for name, eps in parts.items()
        }
        sources.append(
            SourceData(
                name=source,
                train=built["train"],
                validation=built["validation"],
                test=built["test"],
                episodes_by_id={ep.episode_id: ep for ep in eligible},
            )
        )
    return sources


# --- the protocol ------------------------------------------------------------------


def run_single(config: ExperimentConfig, seed: int, bundle=None, evaluate_test=True, log_sink=None):
    """One seeded train/transfer/test cycle; returns (stages, validation log)."""
    resolved = config.resolved()
    task = resolved["task"]
    bundle = bundle if bundle is not None else prepare_data(config, seed)
    first, second = bundle[0], bundle[1]

    model = SequenceModel(SequenceModelConfig(**resolved["model"]), seed=seed)
    strategy = make_strategy(
        resolved["method"], resolved["buffer_capacity"], resolved["importance"],
        seed, fisher_mode=resolved["fisher_mode"],
    )
    loss_fn = task_loss(task)

    def train_cfg(source_name):
        return TrainConfig(
            task=task, epochs=resolved["epochs"], batch_size=resolved["batch_size"],
            sample_cap=resolved["sample_cap"][source_name],
            learning_rate=resolved["learning_rate"], seed=seed,
            eval_batch_size=resolved["eval_batch_size"], mad_units=resolved["mad_units"],
        )

    def score(samples):
        return evaluate(
            model, samples, task,
            batch_size=resolved["eval_batch_size"], mad_units=resolved["mad_units"],
        )

    log = []
    sink = log_sink if log_sink is not None else log.append

    train_on_source(
        model, first.train, train_cfg(first.name), strategy,
        validation_sets=[(first.name, first.validation)], log_sink=sink,
    )
    stages = {}
    if evaluate_test:
        m1 = score(first.test)
        m2 = score(second.test)  # forecasting score, pre-transfer
        stages["after_source_1"] = {
            first.name: m1,
            second.name: m2,
            "psa": {metric: psa([m1[metric]], 1) for metric in m1},
        }
    else:
        v1 = score(first.validation)
        stages["after_source_1"] = {
            first.name: v1,
            "psa": {metric: psa([v1[metric]], 1) for metric in v1},
        }

    strategy.finish_source(model, first.train, first.name, loss_fn, task)

    train_on_source(
        model, second.train, train_cfg(second.name), strategy,
        validation_sets=[(first.name, first.validation), (second.name, second.validation)],
        log_sink=sink,
    )
    if evaluate_test:
        m1 = score(first.test)
        m2 = score(second.test)
    else:
        m1 = score(first.validation)
        m2 = score(second.validation)
    stages["after_source_2"] = {
        first.name: m1,
        second.name: m2,
        "psa": {metric: psa([m1[metric], m2[metric]], 2) for metric in m1},
    }
    return stages, log


@dataclass
class ResultsRecord:
    config: dict
    digest: str
    report: MetricsReport
    aggregate: dict = field(default_factory=dict)

    def finalize(self):
        self.aggregate = self.report.aggregate()
        return self

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "digest": self.digest,
            "per_seed": self.report.per_seed,
            "aggregate": self.aggregate,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ResultsRecord:
    """The full multi-seed protocol; flushes partial results if a seed fails."""
    resolved = config.resolved()
    out_dir = Path(out_dir or resolved["out_dir"] or os.environ.get(OUTPUT_DIR_ENV, "results"))
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MetricsReport(
        task=resolved["task"], method=resolved["method"], sources=resolved["sources"]
    )
    recorded = {k: v for k, v in resolved.items() if k != "out_dir"}
    record = ResultsRecord(config=recorded, digest=config.digest(), report=report)
    try:
        for k in range(resolved["seeds"]):
            seed = resolved["base_seed"] + k
            log_path = out_dir / f"val_log_seed{seed}.jsonl"
            with open(log_path, "w") as fh:
                def sink(entry):
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

                stages, _ = run_single(config, seed, log_sink=sink)
            report.add_seed(stages)
    except Exception:
        record.finalize()
        (out_dir / "results_partial.json").write_text(record.to_json())
        raise
    record.finalize()
    (out_dir / "results.json").write_text(record.to_json())
    _write_results_csv(record, out_dir / "results.csv")
    return record


def _write_results_csv(record: ResultsRecord, path):
    region = record.config["sources"][-1]
    rows = record.report.to_rows(region)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "region", "method", "seed", "source", "metric", "value"])
    for row in rows:
        writer.writerow(
            [row["task"], row["region"], row["method"], row["seed"], row["source"],
             row["metric"], repr(row["value"])]
        )
    Path(path).write_text(buf.getvalue())


# --- grid search --------------------------------------------------------------------


def grid_search(config: ExperimentConfig, epochs_grid=None, importance_grid=None) -> dict:
    """Exhaustive validation-only search over epochs and anchor importance.

    Selection maximizes the final validation PSA of the task's primary
    metric (5-seed mean by default); ties prefer smaller importance, then
    fewer epochs.  Test splits are never touched.
    """
    resolved = config.resolved()
    task = resolved["task"]
    if epochs_grid is None:
        epochs_grid = list(EPOCHS_GRID) if task in ("ihm", "phenotyping") else [resolved["epochs"]]
    if importance_grid is None:
        importance_grid = (
            list(IMPORTANCE_GRID) if resolved["method"] in ("ewc", "combined") else [resolved["importance"]]
        )
    if not epochs_grid or not importance_grid:
        raise UsageError("grid_search needs non-empty grids")

    cells = sorted(
        ((imp, ep) for imp in importance_grid for ep in epochs_grid),
        key=lambda cell: (cell[0], cell[1]),
    )
    metric = PRIMARY_METRIC[task]
    scores = {cell: [] for cell in cells}
    for k in range(resolved["seeds"]):
        seed = resolved["base_seed"] + k
        bundle = prepare_data(config, seed)
        for imp, ep in cells:
            trial = ExperimentConfig(
                **{
                    **{f.name: getattr(config, f.name) for f in fields(ExperimentConfig)},
                    "importance": imp,
                    "epochs": ep,
                }
            )
            stages, _ = run_single(trial, seed, bundle=bundle, evaluate_test=False)
            scores[(imp, ep)].append(stages["after_source_2"]["psa"][metric])

    table = [
        {
            "importance": imp,
            "epochs": ep,
            "validation_psa_mean": float(np.mean(scores[(imp, ep)])),
            "validation_psa_values": scores[(imp, ep)],
        }
        for imp, ep in cells
    ]
    best = None
    for entry in table:
        if best is None or entry["validation_psa_mean"] > best["validation_psa_mean"]:
            best = entry
    return {
        "selection_metric": metric,
        "best": {"importance": best["importance"], "epochs": best["epochs"],
                 "validation_psa_mean": best["validation_psa_mean"]},
        "cells": table,
    }


# --- reporting ------------------------------------------------------------------------


def report_emit(results_dir, out_dir=None) -> list:
    """Benchmark-table CSVs (one per task) plus any analysis plot data found.

    Rows are method x target region with the first source's pre-transfer
    row on top; cells are final per-source-average values formatted
    `mean (std)`.
    """
    results_dir = Path(results_dir)
    records = []
    for path in sorted(results_dir.rglob("results.json")):
        records.append(json.loads(path.read_text()))
    if not records:
        raise NoResults(f"no results.json under {results_dir}")
    out_dir = Path(out_dir or results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    by_task = {}
    for record in records:
        by_task.setdefault(record["config"]["task"], []).append(record)
    for task, group in sorted(by_task.items()):
        metrics = sorted(
            {m for r in group for m in r["aggregate"]["after_source_2"]["psa"]}
        )
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "region"] + [f"psa_{m}" for m in metrics])
        first = group[0]
        src1 = first["config"]["sources"][0]
        base_cells = []
        for m in metrics:
            cell = first["aggregate"]["after_source_1"][src1][m]
            base_cells.append(format_mean_std(cell["mean"], cell["std"]))
        writer.writerow(["(source only)", src1] + base_cells)
        for record in sorted(
            group, key=lambda r: (r["config"]["sources"][-1], METHODS.index(r["config"]["method"]))
        ):
            cells = []
            for m in metrics:
                cell = record["aggregate"]["after_source_2"]["psa"][m]
                cells.append(format_mean_std(cell["mean"], cell["std"]))
            writer.writerow([record["config"]["method"], record["config"]["sources"][-1]] + cells)
        path = out_dir / f"table_{task}.csv"
        path.write_text(buf.getvalue())
        written.append(path)

    for analysis in sorted(results_dir.rglob("distributions.json")):
        written.extend(_distribution_csvs(json.loads(analysis.read_text()), out_dir))
    return written


def _distribution_csvs(summaries: dict, out_dir: Path) -> list:
    """Long-form histogram and summary CSVs from {region: distribution_summary}."""
    hist_buf, sum_buf = io.StringIO(), io.StringIO()
    hist = csv.writer(hist_buf, lineterminator="\n")
    summ = csv.writer(sum_buf, lineterminator="\n")
    hist.writerow(["channel", "region", "bin_left", "bin_right", "count"])
    summ.writerow(["channel", "region", "absent", "n_episodes", "mean", "q1", "q3"])
    for region in sorted(summaries):
        for channel in sorted(summaries[region]):
            info = summaries[region][channel]
            if info.get("absent"):
                summ.writerow([channel, region, 1, 0, "", "", ""])
                continue
            summ.writerow(
                [channel, region, 0, info["n_episodes"], repr(info["mean"]),
                 repr(info["iqr"][0]), repr(info["iqr"][1])]
            )
            edges = info["bin_edges"]
            for left, right, count in zip(edges[:-1], edges[1:], info["counts"]):
                hist.writerow([channel, region, repr(left), repr(right), count])
    hist_path = out_dir / "distribution_histograms.csv"
    sum_path = out_dir / "distribution_summary.csv"
    hist_path.write_text(hist_buf.getvalue())
    sum_path.write_text(sum_buf.getvalue())
    return [hist_path, sum_path]


def analyze_cohorts(cohorts_by_region: dict, out_dir) -> dict:
    """Frequency table plus distribution plot data for one or more cohorts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    regions = sorted(cohorts_by_region)
    freq = {region: measurement_frequency(cohorts_by_region[region]) for region in regions}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["channel"] + regions)
    for name in DEFAULT_SCHEMA.names:
        writer.writerow([name] + [repr(freq[region][name]) for region in regions])
    (out_dir / "frequency_table.csv").write_text(buf.getvalue())

    summaries = {region: distribution_summary(cohorts_by_region[region]) for region in regions}
    (out_dir / "distributions.json").write_text(json.dumps(summaries, indent=2, sort_keys=True))
    _distribution_csvs(summaries, out_dir)
    return {"frequencies": freq, "distributions": summaries}
