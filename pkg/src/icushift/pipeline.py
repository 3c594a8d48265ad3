"""From raw episodes to model-ready task samples.

Discretization bins each channel hourly (bin t covers [t, t+1)), keeping
the last recorded value in a bin, forward-filling empty bins, and falling
back to the channel's normal value before anything was recorded.  A mask
column per channel marks bins holding a true measurement.  Categorical
channels are one-hot over their schema categories.  Value blocks come
first in schema order, then the 17 mask columns: 76 columns total for the
default schema.

Continuous columns are z-normalized with constants frozen on the first
source's training split, so target-domain statistics never leak into a
transfer run.

Per-step tasks (decompensation, remaining-stay class) are represented as
one sample per episode: the full sequence, a per-step target vector, and
a validity mask selecting hours 5..floor(stay).  Row t of the input holds
hour [t, t+1), so the model's output at row t-1 is the prediction for
hour t, causal by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import CATEGORICAL, ChannelSchema, DEFAULT_SCHEMA, EpisodeRecord
from .errors import EmptyCohort, SchemaMismatch, TooShort

TASKS = ("ihm", "decompensation", "los", "phenotyping")
IHM_HORIZON = 48
MIN_STAY_PER_STEP = 5
MIN_RECORDS = 15
MIN_AGE = 18
DECOMP_WINDOW = 24.0
LOS_CLASSES = 10


@dataclass
class TaskSample:
    input: np.ndarray  # (T, width)
    task: str
    target: object  # float | (25,) | per-step vector
    episode_id: str
    source_id: str
    step_mask: np.ndarray | None = None  # (T,) floats for per-step tasks
    length: int = 0

    def __post_init__(self):
        if self.length == 0:
            self.length = self.input.shape[0]

    @property
    def label_count(self) -> int:
        if self.step_mask is None:
            return 1
        return int(self.step_mask.sum())


def apply_exclusions(cohort, task: str):
    """Filter a cohort down to episodes eligible for the given task."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    kept = []
    for ep in cohort:
        if ep.age < MIN_AGE:
            continue
        if ep.record_count < MIN_RECORDS:
            continue
        if not ep.label_consistent:
            continue
        if ep.los_hours <= 0:
            continue
        if task == "ihm" and ep.los_hours < IHM_HORIZON:
            continue
        if task in ("decompensation", "los") and ep.los_hours < MIN_STAY_PER_STEP:
            continue
        kept.append(ep)
    return kept


class Normalizer:
    """Z-scaling for the continuous value columns of discretized matrices."""

    def __init__(self, schema: ChannelSchema = DEFAULT_SCHEMA):
        self.schema = schema
        offsets = schema.value_offsets()
        self.columns = np.array(
            [offsets[c.name] for c in schema.channels if c.kind != CATEGORICAL],
            dtype=np.int64,
        )
        self.mean = None
        self.std = None

    def fit(self, matrices):
        if not matrices:
            raise EmptyCohort("cannot fit a normalizer on no matrices")
        stacked = np.concatenate([m[:, self.columns] for m in matrices], axis=0)
        self.mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std[std < 1e-9] = 1.0
        self.std = std
        return self

    def apply(self, matrix):
        if self.mean is None:
            raise ValueError("normalizer not fitted")
        out = matrix.copy()
        out[:, self.columns] = (out[:, self.columns] - self.mean) / self.std
        return out


def discretize_episode(
    episode: EpisodeRecord,
    schema: ChannelSchema = DEFAULT_SCHEMA,
    horizon: int | None = None,
    normalizer: Normalizer | None = None,
) -> np.ndarray:
    """Hourly (T, total_width) matrix for the first `horizon` hours.

    Default horizon covers the full stay (ceil of the stay length).
    """
    if horizon is None:
        horizon = max(1, int(np.ceil(episode.los_hours)))
    if horizon > int(np.ceil(episode.los_hours)):
        raise TooShort(
            f"{episode.episode_id}: horizon {horizon} exceeds stay {episode.los_hours:.2f}h"
        )
    if horizon < 1:
        raise TooShort(f"{episode.episode_id}: horizon must be >= 1")

    width = schema.total_width
    out = np.zeros((horizon, width))
    offsets = schema.value_offsets()

    for ch_idx, ch in enumerate(schema.channels):
        ev = episode.events.get(ch.name)
        col = offsets[ch.name]
        if ev is None or len(ev[0]) == 0:
            bins = np.empty(0, dtype=np.int64)
            values = np.empty(0)
        else:
            times, values = ev
            keep = times < horizon
            raw_bins = times[keep].astype(np.int64)
            values = values[keep]
            # last value per bin; times are sorted, so take the rightmost
            bins, last_pos = _last_per_bin(raw_bins)
            values = values[last_pos]

        mask_col = schema.mask_offset(ch_idx)
        out[bins, mask_col] = 1.0

        # forward-fill, then fall back to the normal value
        per_bin = np.full(horizon, np.nan)
        per_bin[bins] = values
        filled_idx = np.where(~np.isnan(per_bin), np.arange(horizon), -1)
        np.maximum.accumulate(filled_idx, out=filled_idx)
        resolved = np.where(
            filled_idx >= 0, per_bin[np.clip(filled_idx, 0, None)], ch.normal_value
        )

        if ch.kind == CATEGORICAL:
            cats = np.asarray(ch.categories)
            cat_idx = _category_indices(resolved, cats, ch.name, episode.episode_id)
            out[np.arange(horizon), col + cat_idx] = 1.0
        else:
            out[:, col] = resolved

    if normalizer is not None:
        out = normalizer.apply(out)
    return out


def _last_per_bin(sorted_bins: np.ndarray):
    if sorted_bins.size == 0:
        return sorted_bins, np.empty(0, dtype=np.int64)
    unique = np.unique(sorted_bins)
    last = np.searchsorted(sorted_bins, unique, side="right") - 1
    return unique, last


def _category_indices(values, categories, channel, episode_id):
    idx = np.searchsorted(categories, values)
    idx = np.clip(idx, 0, len(categories) - 1)
    if not np.all(categories[idx] == values):
        bad = values[categories[idx] != values][0]
        raise SchemaMismatch(
            f"{episode_id}: value {bad!r} is not a category of channel {channel}"
        )
    return idx


# --- task extraction -----------------------------------------------------------


def extract_ihm(episode, schema=DEFAULT_SCHEMA, normalizer=None, source_id="") -> TaskSample:
    if episode.los_hours < IHM_HORIZON:
        raise TooShort(f"{episode.episode_id}: stay below {IHM_HORIZON}h")
    mat = discretize_episode(episode, schema, IHM_HORIZON, normalizer)
    return TaskSample(
        input=mat,
        task="ihm",
        target=1.0 if episode.mortality else 0.0,
        episode_id=episode.episode_id,
        source_id=source_id,
    )


def _per_step_frame(episode, schema, normalizer):
    steps = int(np.floor(episode.los_hours))
    if steps < MIN_STAY_PER_STEP:
        raise TooShort(f"{episode.episode_id}: stay below {MIN_STAY_PER_STEP}h")
    mat = discretize_episode(episode, schema, steps, normalizer)
    mask = np.zeros(steps)
    mask[MIN_STAY_PER_STEP - 1 :] = 1.0  # row t-1 predicts hour t; hours 5..steps
    return mat, mask, steps


def extract_decompensation(episode, schema=DEFAULT_SCHEMA, normalizer=None, source_id="") -> TaskSample:
    mat, mask, steps = _per_step_frame(episode, schema, normalizer)
    hours = np.arange(1, steps + 1, dtype=np.float64)
    if episode.death_hour is None:
        labels = np.zeros(steps)
    else:
        d = float(episode.death_hour)
        labels = ((hours < d) & (d <= hours + DECOMP_WINDOW)).astype(np.float64)
    return TaskSample(
        input=mat,
        task="decompensation",
        target=labels,
        episode_id=episode.episode_id,
        source_id=source_id,
        step_mask=mask,
    )


def los_class(remaining_hours: float) -> int:
    """10 bins: <1 day, the seven single days, week two, beyond two weeks."""
    if remaining_hours < 24.0:
        return 0
    day = int(remaining_hours // 24.0)
    if day <= 7:
        return day
    if remaining_hours < 336.0:
        return 8
    return 9


def extract_los(episode, schema=DEFAULT_SCHEMA, normalizer=None, source_id="") -> TaskSample:
    mat, mask, steps = _per_step_frame(episode, schema, normalizer)
    hours = np.arange(1, steps + 1, dtype=np.float64)
    remaining = episode.los_hours - hours
    classes = np.array([los_class(r) for r in remaining], dtype=np.int64)
    return TaskSample(
        input=mat,
        task="los",
        target=classes,
        episode_id=episode.episode_id,
        source_id=source_id,
        step_mask=mask,
    )


def extract_phenotyping(episode, schema=DEFAULT_SCHEMA, normalizer=None, source_id="") -> TaskSample:
    mat = discretize_episode(episode, schema, None, normalizer)
    return TaskSample(
        input=mat,
        task="phenotyping",
        target=np.asarray(episode.phenotypes, dtype=np.float64),
        episode_id=episode.episode_id,
        source_id=source_id,
    )


_EXTRACTORS = {
    "ihm": extract_ihm,
    "decompensation": extract_decompensation,
    "los": extract_los,
    "phenotyping": extract_phenotyping,
}


def build_task_samples(cohort, task, schema=DEFAULT_SCHEMA, normalizer=None, source_id=""):
    """Exclusions + extraction for a whole cohort."""
    extract = _EXTRACTORS[task]
    return [
        extract(ep, schema=schema, normalizer=normalizer, source_id=source_id)
        for ep in apply_exclusions(cohort, task)
    ]


# --- splits -----------------------------------------------------------------------


@dataclass
class SplitAssignment:
    by_patient: dict  # patient id -> "train" | "validation" | "test"

    def of(self, episode) -> str:
        return self.by_patient[episode.patient_id]

    def select(self, cohort, split: str):
        return [ep for ep in cohort if self.by_patient[ep.patient_id] == split]


def make_splits(cohort, seed: int, fractions=(0.70, 0.15, 0.15)) -> SplitAssignment:
    """Patient-level random 70-15-15 assignment; all episodes of a patient share a split."""
    if not cohort:
        raise EmptyCohort("make_splits on an empty cohort")
    patients = list(dict.fromkeys(ep.patient_id for ep in cohort))
    rng = np.random.default_rng(np.random.SeedSequence([0x5711, seed]))
    order = rng.permutation(len(patients))
    n = len(patients)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "validation"
        else:
            split = "test"
        assignment[patients[idx]] = split
    return SplitAssignment(by_patient=assignment)


# --- batching ---------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray  # (B, T, width) zero-padded
    lengths: np.ndarray  # (B,)
    targets: np.ndarray
    mask: np.ndarray | None  # (B, T, 1) for per-step tasks
    task: str
    size: int


def collate(samples, task: str) -> Batch:
    """Pad a list of samples into dense batch arrays."""
    bsz = len(samples)
    lengths = np.array([s.length for s in samples], dtype=np.int64)
    t_max = int(lengths.max())
    width = samples[0].input.shape[1]
    x = np.zeros((bsz, t_max, width))
    for k, s in enumerate(samples):
        x[k, : s.length] = s.input

    if task == "ihm":
        targets = np.array([[s.target] for s in samples])
        mask = None
    elif task == "phenotyping":
        targets = np.stack([s.target for s in samples])
        mask = None
    elif task == "decompensation":
        targets = np.zeros((bsz, t_max, 1))
        mask = np.zeros((bsz, t_max, 1))
        for k, s in enumerate(samples):
            targets[k, : s.length, 0] = s.target
            mask[k, : s.length, 0] = s.step_mask
    elif task == "los":
        targets = np.zeros((bsz, t_max, LOS_CLASSES))
        mask = np.zeros((bsz, t_max, 1))
        for k, s in enumerate(samples):
            targets[k, np.arange(s.length), s.target] = 1.0
            mask[k, : s.length, 0] = s.step_mask
    else:
        raise ValueError(f"unknown task {task!r}")
    return Batch(x=x, lengths=lengths, targets=targets, mask=mask, task=task, size=bsz)
