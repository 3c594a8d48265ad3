"""Losses, Adam, evaluation, and the per-source training loop.

The loop trains one source at a time: seeded shuffling per (run seed,
source index, epoch), one optimizer step per batch with the loss supplied
by the continual-learning strategy, and an eval-mode pass over every
validation set seen so far at the end of each epoch.  Evaluation never
touches parameters.

The multi-class loss follows the per-class binary form (sum of the
per-class binary terms over classes, averaged over samples); plain
categorical log-loss is available separately as `ce_categorical_loss`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import EmptySource, MissingGradient, NotNormalized, ShapeMismatch
from .metrics import task_metrics
from .pipeline import Batch, collate
from .tensor import Tape, Tensor

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    task: str
    epochs: int = 1
    batch_size: int = 8
    sample_cap: int | None = None
    learning_rate: float = 1e-3
    seed: int = 0
    eval_batch_size: int = 64
    mad_units: str = "class"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


# --- losses ------------------------------------------------------------------


def _prepare_targets(scores: Tensor, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != scores.data.shape:
        raise ShapeMismatch(f"loss: scores {scores.data.shape} vs targets {t.shape}")
    return t


def _mask_weights(shape, mask) -> tuple[np.ndarray, float]:
    if mask is None:
        return np.full(shape, 1.0 / math.prod(shape)), float(math.prod(shape))
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        m = np.broadcast_to(m, shape).copy()
    count = m.sum()
    if count == 0:
        raise EmptySource("loss mask selects no elements")
    return m / count, float(count)


def bce_loss(scores, targets, mask=None) -> Tensor:
    """Mean binary cross entropy with a 1e-12 probability floor."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    y = _prepare_targets(scores, targets)
    p = tg.clip(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)
    term = tg.add(
        tg.mul(Tensor(y), tg.log(p)),
        tg.mul(Tensor(1.0 - y), tg.log(tg.sub(1.0, p))),
    )
    weights, _ = _mask_weights(y.shape, mask)
    return tg.scale(tg.sum_all(tg.mul(term, Tensor(weights))), -1.0)


def _row_weights(y_shape, mask):
    """Per-element weights that average over rows (`mask` marks valid rows)."""
    if mask is None:
        rows = math.prod(y_shape[:-1])
        return np.full(y_shape, 1.0 / rows)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != y_shape[:-1]:
        raise ShapeMismatch(f"row mask {m.shape} does not match rows {y_shape[:-1]}")
    rows = m.sum()
    if rows == 0:
        raise EmptySource("loss mask selects no rows")
    return np.broadcast_to((m / rows)[..., None], y_shape).copy()


def ce_loss(scores, targets, mask=None) -> Tensor:
    """Per-class binary cross entropy, summed over classes, averaged over rows.

    `scores` rows must lie on the simplex (checked to 1e-9); `targets` is
    one-hot with the same shape; `mask` (optional) marks valid rows.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    y = _prepare_targets(scores, targets)
    if scores.data.ndim < 2:
        raise ShapeMismatch("ce_loss expects (..., classes) scores")
    row_sums = scores.data.sum(axis=-1)
    checked = row_sums if mask is None else row_sums[np.asarray(mask) > 0]
    if checked.size and np.max(np.abs(checked - 1.0)) > 1e-9:
        raise NotNormalized("ce_loss scores rows must sum to 1")
    p = tg.clip(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)
    term = tg.add(
        tg.mul(Tensor(y), tg.log(p)),
        tg.mul(Tensor(1.0 - y), tg.log(tg.sub(1.0, p))),
    )
    weights = _row_weights(y.shape, mask)
    return tg.scale(tg.sum_all(tg.mul(term, Tensor(weights))), -1.0)


def ce_categorical_loss(scores, targets, mask=None) -> Tensor:
    """Plain categorical log-loss option: -mean log p[true class]."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    y = _prepare_targets(scores, targets)
    p = tg.clip(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)
    picked = tg.mul(Tensor(y), tg.log(p))
    weights = _row_weights(y.shape, mask)
    return tg.scale(tg.sum_all(tg.mul(picked, Tensor(weights))), -1.0)


def task_loss(task: str):
    """Loss closure `fn(model, batch, mode, rng) -> Tensor` for a task."""

    def fn(model, batch: Batch, mode: str, rng) -> Tensor:
        scores = model.forward(batch.x, mode=mode, rng=rng, lengths=batch.lengths)
        if task in ("ihm", "phenotyping"):
            return bce_loss(scores, batch.targets)
        if task == "decompensation":
            return bce_loss(scores, batch.targets, mask=batch.mask)
        if task == "los":
            return ce_loss(scores, batch.targets, mask=batch.mask[..., 0])
        raise ValueError(f"unknown task {task!r}")

    return fn


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float
    beta2: float
    eps: float


class Adam:
    """Standard Adam with bias correction over a flattened parameter vector."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        sizes = [p.data.size for p in self.params]
        bounds = np.cumsum([0] + sizes)
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.state = AdamState(
            step=0, m=np.zeros(bounds[-1]), v=np.zeros(bounds[-1]),
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient("adam step with an ungraded parameter")
        g = np.concatenate([p.grad.ravel() for p in self.params])
        st = self.state
        st.step += 1
        st.m *= st.beta1
        st.m += (1.0 - st.beta1) * g
        st.v *= st.beta2
        st.v += (1.0 - st.beta2) * g * g
        m_hat = st.m / (1.0 - st.beta1**st.step)
        v_hat = st.v / (1.0 - st.beta2**st.step)
        delta = st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
        for p, sl in zip(self.params, self.slices):
            p.data -= delta[sl].reshape(p.data.shape)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# --- evaluation ----------------------------------------------------------------


def predict(model, samples, task: str, batch_size: int = 64):
    """Pooled eval-mode scores and labels over a sample list."""
    order = sorted(range(len(samples)), key=lambda k: samples[k].length)
    scores_parts, label_parts = [], []
    for start in range(0, len(order), batch_size):
        chunk = [samples[k] for k in order[start : start + batch_size]]
        batch = collate(chunk, task)
        out = model.forward(batch.x, mode="eval", lengths=batch.lengths).data
        if task == "ihm":
            scores_parts.append(out[:, 0])
            label_parts.append(batch.targets[:, 0])
        elif task == "phenotyping":
            scores_parts.append(out)
            label_parts.append(batch.targets)
        elif task == "decompensation":
            valid = batch.mask[..., 0] > 0
            scores_parts.append(out[..., 0][valid])
            label_parts.append(batch.targets[..., 0][valid])
        elif task == "los":
            valid = batch.mask[..., 0] > 0
            scores_parts.append(out[valid])
            label_parts.append(batch.targets[valid].argmax(axis=-1))
    return np.concatenate(scores_parts, axis=0), np.concatenate(label_parts, axis=0)


def evaluate(model, samples, task: str, batch_size: int = 64, mad_units: str = "class") -> dict:
    scores, labels = predict(model, samples, task, batch_size)
    return task_metrics(task, scores, labels, mad_units=mad_units)


# --- sample budget ---------------------------------------------------------------


def apply_sample_cap(samples, cap, rng):
    """Seeded subset honoring the per-source budget.

    Per-episode tasks count episodes; per-step tasks count labeled steps,
    truncating the boundary episode's mask so the total is exact.
    """
    if cap is None or not samples:
        return list(samples)
    order = rng.permutation(len(samples))
    if samples[0].step_mask is None:
        return [samples[k] for k in order[: min(cap, len(samples))]]
    chosen, used = [], 0
    for k in order:
        s = samples[k]
        need = cap - used
        if need <= 0:
            break
        have = s.label_count
        if have <= need:
            chosen.append(s)
            used += have
        else:
            trimmed_mask = s.step_mask.copy()
            valid_pos = np.nonzero(trimmed_mask > 0)[0]
            trimmed_mask[valid_pos[need:]] = 0.0
            chosen.append(
                type(s)(
                    input=s.input, task=s.task, target=s.target,
                    episode_id=s.episode_id, source_id=s.source_id,
                    step_mask=trimmed_mask, length=s.length,
                )
            )
            used = cap
    return chosen


# --- the per-source loop ----------------------------------------------------------


def train_on_source(
    model,
    source_samples,
    config: TrainConfig,
    strategy,
    validation_sets=(),
    log_sink=None,
):
    """Train on one source with the strategy's per-step loss.

    `validation_sets` is a list of (name, samples) pairs covering every
    source seen so far; each is scored after every epoch, in eval mode.
    Returns the list of validation-log entries.
    """
    if not source_samples:
        raise EmptySource("train_on_source with no samples")
    source_index = strategy.sources_seen
    cap_rng = np.random.default_rng(np.random.SeedSequence([config.seed, source_index, 0xCA]))
    samples = apply_sample_cap(source_samples, config.sample_cap, cap_rng)

    n = len(samples)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    strategy.begin_source(config.epochs * batches_per_epoch)

    loss_fn = task_loss(config.task)
    optimizer = Adam(model.parameter_tensors(), lr=config.learning_rate)
    dropout_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, source_index, 0xD0])
    )

    log = []
    for epoch in range(config.epochs):
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, source_index, epoch])
        )
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            chunk = [samples[k] for k in order[start : start + config.batch_size]]
            batch = collate(chunk, config.task)
            optimizer.zero_grad()
            with Tape() as tape:
                loss = strategy.step_loss(model, batch, loss_fn, dropout_rng)
                tg.backward(loss, tape)
            optimizer.step()
            strategy.advance()
        for name, val_samples in validation_sets:
            values = evaluate(
                model, val_samples, config.task,
                batch_size=config.eval_batch_size, mad_units=config.mad_units,
            )
            for metric, value in values.items():
                entry = {"source": name, "epoch": epoch + 1, "metric": metric, "value": value}
                log.append(entry)
                if log_sink is not None:
                    log_sink(entry)
    return log
