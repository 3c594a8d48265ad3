"""Task metrics and per-source-average aggregation.

AUC-ROC is computed exactly by average ranks (Mann-Whitney with half
credit for ties).  AUC-PR integrates the precision-recall step curve over
all distinct thresholds.  The stay-class metrics are Cohen's kappa
(linearly weighted by default, the usual choice for ordinal bins) and
mean absolute deviation in class-index units, with bin-midpoint hours as
an option.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllColumnsDegenerate,
    EmptyInput,
    LengthMismatch,
    NoPositives,
    SingleClass,
)

PRIMARY_METRIC = {
    "ihm": "auc_roc",
    "decompensation": "auc_roc",
    "los": "kappa",
    "phenotyping": "macro_auc",
}
SECONDARY_METRIC = {
    "ihm": "auc_pr",
    "decompensation": "auc_pr",
    "los": "mad",
    "phenotyping": "micro_auc",
}

# hour midpoints of the 10 stay classes, for the hour-scale MAD option
LOS_BIN_MIDPOINT_HOURS = (12.0, 36.0, 60.0, 84.0, 108.0, 132.0, 156.0, 180.0, 264.0, 420.0)


def auc_roc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise LengthMismatch(f"auc_roc: {scores.shape} scores vs {labels.shape} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("auc_roc needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise LengthMismatch(f"auc_pr: {scores.shape} scores vs {labels.shape} labels")
    total_pos = int((labels == 1).sum())
    if total_pos == 0:
        raise NoPositives("auc_pr needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.float64)
    tp = np.cumsum(sorted_pos)
    predicted = np.arange(1, scores.size + 1, dtype=np.float64)
    # evaluate only at threshold boundaries (last index of each tie group)
    boundary = np.nonzero(np.diff(sorted_scores) != 0)[0]
    cut = np.concatenate([boundary, [scores.size - 1]])
    recall = tp[cut] / total_pos
    precision = tp[cut] / predicted[cut]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def macro_micro_auc(scores, labels):
    """Column-mean AUC plus AUC over all (sample, label) cells pooled."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise LengthMismatch(f"macro_micro_auc: {scores.shape} vs {labels.shape}")
    per_column = []
    for j in range(scores.shape[1]):
        col = labels[:, j]
        if col.min() == col.max():
            continue  # degenerate column, skipped from the macro mean
        per_column.append(auc_roc(scores[:, j], col))
    if not per_column:
        raise AllColumnsDegenerate("no label column has both classes")
    macro = float(np.mean(per_column))
    micro = auc_roc(scores.ravel(), labels.ravel())
    return macro, micro


def cohen_kappa(pred, true, weighting: str = "linear", num_classes: int | None = None) -> float:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.size == 0:
        raise EmptyInput("cohen_kappa on empty input")
    if pred.shape != true.shape:
        raise LengthMismatch(f"cohen_kappa: {pred.shape} vs {true.shape}")
    if weighting not in ("none", "linear"):
        raise ValueError(f"unknown weighting {weighting!r}")
    c = num_classes or int(max(pred.max(), true.max())) + 1
    observed = np.zeros((c, c))
    np.add.at(observed, (true, pred), 1.0)
    n = pred.size
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(c, dtype=np.float64)
    if weighting == "linear":
        w = np.abs(idx[:, None] - idx[None, :])
    else:
        w = (idx[:, None] != idx[None, :]).astype(np.float64)
    denom = float((w * expected).sum())
    if denom == 0.0:
        return 1.0
    return float(1.0 - (w * observed).sum() / denom)


def mad(pred, true, units: str = "class") -> float:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.size == 0:
        raise EmptyInput("mad on empty input")
    if pred.shape != true.shape:
        raise LengthMismatch(f"mad: {pred.shape} vs {true.shape}")
    if units == "class":
        return float(np.abs(pred - true).mean())
    if units == "hours":
        mid = np.asarray(LOS_BIN_MIDPOINT_HOURS)
        return float(np.abs(mid[pred] - mid[true]).mean())
    raise ValueError(f"unknown units {units!r}")


def psa(per_source_values, s: int) -> float:
    values = list(per_source_values)
    if len(values) != s:
        raise LengthMismatch(f"psa: got {len(values)} values for s={s}")
    return float(np.mean(values))


def task_metrics(task: str, scores, labels, mad_units: str = "class") -> dict:
    """Primary + secondary metric for one evaluation set."""
    if task in ("ihm", "decompensation"):
        return {"auc_roc": auc_roc(scores, labels), "auc_pr": auc_pr(scores, labels)}
    if task == "phenotyping":
        macro, micro = macro_micro_auc(scores, labels)
        return {"macro_auc": macro, "micro_auc": micro}
    if task == "los":
        pred_classes = np.asarray(scores).argmax(axis=-1)
        return {
            "kappa": cohen_kappa(pred_classes, labels),
            "mad": mad(pred_classes, labels, units=mad_units),
        }
    raise ValueError(f"unknown task {task!r}")


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ({std:.3f})"


@dataclass
class MetricsReport:
    """Per-source metric values across seeds, with PSA and mean/std."""

    task: str
    method: str
    sources: list
    per_seed: list = field(default_factory=list)  # [{stage: {source: {metric: value}}}]

    def add_seed(self, stages: dict):
        self.per_seed.append(stages)

    def aggregate(self) -> dict:
        """mean/std (ddof=1 over >=2 seeds) per (stage, source, metric)."""
        agg = {}
        for stages in self.per_seed:
            for stage, sources in stages.items():
                for source, values in sources.items():
                    for metric, value in values.items():
                        agg.setdefault(stage, {}).setdefault(source, {}).setdefault(
                            metric, []
                        ).append(value)
        out = {}
        for stage, sources in agg.items():
            out[stage] = {}
            for source, metrics in sources.items():
                out[stage][source] = {}
                for metric, values in metrics.items():
                    arr = np.asarray(values)
                    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
                    out[stage][source][metric] = {
                        "mean": float(arr.mean()),
                        "std": std,
                        "n": int(arr.size),
                    }
        return out

    def to_rows(self, region: str):
        """Flat rows (task, region, method, seed, source, metric, value)."""
        rows = []
        for seed_idx, stages in enumerate(self.per_seed):
            for stage, sources in stages.items():
                for source, values in sources.items():
                    for metric, value in values.items():
                        rows.append(
                            {
                                "task": self.task,
                                "region": region,
                                "method": self.method,
                                "seed": seed_idx,
                                "source": f"{source} ({stage})",
                                "metric": metric,
                                "value": value,
                            }
                        )
        return rows
