"""Forgetting-mitigation strategies: replay, weight anchoring, and both.

Five kinds share one state object:

* ``baseline``        - the task loss, nothing retained.
* ``ewc``             - task loss plus a quadratic anchor on parameters,
                        weighted per parameter by a Fisher diagonal
                        estimated on the memory buffer.
* ``replay``          - every step mixes the current-batch loss with the
                        loss on a random buffer sample, weighted (1/s,
                        1 - 1/s) by the number of sources seen.
* ``adjusted_replay`` - replay at a fixed period p = floor(N / buffer)
                        over the source's N optimizer steps, walking the
                        buffer sequentially (entry floor(i/p) at step i,
                        each entry used at most once) with the weights
                        reversed to (1 - 1/s, 1/s).
* ``combined``        - adjusted replay with the current-loss term
                        replaced by the anchored (EWC) loss in both
                        branches.

With a single source seen, every kind reduces to the plain task loss.

The scheduling index counts optimizer steps (one batch = one tick, one
adjustment = one buffer entry), mapping the per-sample formulation onto
batched training.  `begin_source` fixes N for the source about to train;
`finish_source` snapshots parameters, refreshes the buffer, and
recomputes the Fisher diagonal on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tg
from .errors import InvalidPeriod, LengthMismatch, NoBuffer
from .pipeline import collate
from .tensor import Tape, Tensor

KINDS = ("baseline", "ewc", "replay", "adjusted_replay", "combined")


# --- memory buffer -----------------------------------------------------------


@dataclass
class MemoryBuffer:
    """Bounded sample store holding an equal share per finished source."""

    capacity: int
    rng: np.random.Generator
    entries: list = field(default_factory=list)  # [(sample, source_id)]
    _sources: list = field(default_factory=list)  # source ids in arrival order

    def __len__(self):
        return len(self.entries)

    def update(self, finished_source, source_id: str):
        """Fold a finished source in: evict down to equal shares, then add.

        Shares are assigned smallest-available first, so a source with
        fewer samples than its fair share keeps everything it has and the
        remainder goes to the others.
        """
        held = {}
        for sample, src in self.entries:
            held.setdefault(src, []).append(sample)
        held[source_id] = list(finished_source)
        self._sources = [s for s in self._sources if s in held]
        if source_id not in self._sources:
            self._sources.append(source_id)

        remaining_cap = self.capacity
        order = sorted(self._sources, key=lambda s: (len(held[s]), self._sources.index(s)))
        quota = {}
        for pos, src in enumerate(order):
            share = remaining_cap // (len(order) - pos)
            take = min(len(held[src]), share)
            quota[src] = take
            remaining_cap -= take

        new_entries = []
        for src in self._sources:
            pool = held[src]
            take = quota[src]
            if take < len(pool):
                picked = self.rng.choice(len(pool), size=take, replace=False)
                pool = [pool[int(k)] for k in np.sort(picked)]
            new_entries.extend((sample, src) for sample in pool)
        self.entries = new_entries

    def per_source_counts(self) -> dict:
        counts = {}
        for _, src in self.entries:
            counts[src] = counts.get(src, 0) + 1
        return counts


def buffer_update(buffer: MemoryBuffer, finished_source, source_id: str) -> MemoryBuffer:
    buffer.update(finished_source, source_id)
    return buffer


# --- pure weight/schedule arithmetic ---------------------------------------------


def replay_weights(s: int) -> tuple[float, float]:
    """(current, replayed) weights of traditional replay."""
    return 1.0 / s, 1.0 - 1.0 / s


def adjusted_weights(s: int) -> tuple[float, float]:
    """(current, replayed) weights of adjusted replay: the reverse."""
    return 1.0 - 1.0 / s, 1.0 / s


def schedule_period(total_steps: int, buffer_size: int) -> int:
    if buffer_size >= total_steps:
        raise InvalidPeriod(
            f"buffer size {buffer_size} must be below the source's {total_steps} steps"
        )
    return total_steps // buffer_size


def adjusted_schedule(i: int, total_steps: int, buffer_size: int):
    """Buffer index to replay at step i, or None on a plain step.

    Adjustments land every p = floor(N / buffer_size) steps starting at
    i = 0, taking entry floor(i / p); entries beyond the buffer are never
    revisited, so each is used at most once per source.
    """
    p = schedule_period(total_steps, buffer_size)
    if i % p != 0:
        return None
    j = i // p
    return j if j < buffer_size else None


def traditional_replay_loss(loss_curr, loss_rep, s: int):
    """(1/s) * current + (1 - 1/s) * replayed; needs a previous source."""
    w_curr, w_rep = replay_weights(s)
    if isinstance(loss_curr, Tensor) or isinstance(loss_rep, Tensor):
        return tg.add(tg.scale(loss_curr, w_curr), tg.scale(loss_rep, w_rep))
    return w_curr * loss_curr + w_rep * loss_rep


def adjusted_replay_loss(loss_curr, loss_rep_j, s: int):
    """(1 - 1/s) * current + (1/s) * replayed, used on adjustment steps only."""
    w_curr, w_rep = adjusted_weights(s)
    if isinstance(loss_curr, Tensor) or isinstance(loss_rep_j, Tensor):
        return tg.add(tg.scale(loss_curr, w_curr), tg.scale(loss_rep_j, w_rep))
    return w_curr * loss_curr + w_rep * loss_rep_j


# --- EWC pieces ---------------------------------------------------------------------


def ewc_penalty(params, theta_star: np.ndarray, fisher: np.ndarray, importance: float) -> Tensor:
    """importance * sum_i (1/2) F_i (theta_i - theta*_i)^2 as a graph node."""
    total_size = sum(p.data.size for p in params)
    if theta_star.size != total_size or fisher.size != total_size:
        raise LengthMismatch(
            f"snapshot/fisher of {theta_star.size}/{fisher.size} for {total_size} parameters"
        )
    penalty = None
    pos = 0
    for p in params:
        n = p.data.size
        star = theta_star[pos : pos + n].reshape(p.data.shape)
        f = fisher[pos : pos + n].reshape(p.data.shape)
        pos += n
        if not np.any(f):
            continue
        diff = tg.sub(p, Tensor(star))
        term = tg.sum_all(tg.mul(Tensor(f), tg.mul(diff, diff)))
        penalty = term if penalty is None else tg.add(penalty, term)
    if penalty is None:
        return Tensor(0.0)
    return tg.scale(penalty, 0.5 * importance)


def fisher_diagonal(model, buffer: MemoryBuffer, loss_fn, task: str, mode: str = "per_sample") -> np.ndarray:
    """Per-parameter squared loss gradients on the buffer, in eval mode.

    `per_sample` averages each buffer sample's squared gradient (the
    empirical Fisher); `aggregate` squares the gradient of the whole
    buffer's mean loss instead, the literal one-pass reading.
    """
    if len(buffer) == 0:
        raise NoBuffer("fisher_diagonal on an empty buffer")
    params = model.parameter_tensors()
    total = sum(p.data.size for p in params)
    if mode == "aggregate":
        batch = collate([sample for sample, _ in buffer.entries], task)
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = loss_fn(model, batch, "eval", None)
            tg.backward(loss, tape)
        g = _flat_grads(params)
        for p in params:
            p.grad = None
        return g * g / len(buffer)
    if mode != "per_sample":
        raise ValueError(f"unknown fisher mode {mode!r}")
    acc = np.zeros(total)
    for sample, _ in buffer.entries:
        batch = collate([sample], task)
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = loss_fn(model, batch, "eval", None)
            tg.backward(loss, tape)
        g = _flat_grads(params)
        acc += g * g
    for p in params:
        p.grad = None
    return acc / len(buffer)


def _flat_grads(params) -> np.ndarray:
    return np.concatenate(
        [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in params
        ]
    )


# --- strategy state --------------------------------------------------------------------


@dataclass
class StrategyState:
    """Everything a mitigation strategy carries across sources."""

    kind: str
    buffer: MemoryBuffer
    importance: float = 0.0
    fisher_mode: str = "per_sample"
    theta_star: np.ndarray | None = None
    fisher_diag: np.ndarray | None = None
    sources_seen: int = 1
    step_index: int = 0
    steps_in_source: int | None = None
    period: int | None = None
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.rng is None:
            self.rng = np.random.default_rng(0)

    @property
    def uses_buffer(self) -> bool:
        return self.kind in ("ewc", "replay", "adjusted_replay", "combined")

    @property
    def uses_anchor(self) -> bool:
        return self.kind in ("ewc", "combined")

    @property
    def scheduled(self) -> bool:
        return self.kind in ("adjusted_replay", "combined")

    def begin_source(self, total_steps: int):
        """Fix the step budget for the source about to train."""
        self.steps_in_source = total_steps
        self.step_index = 0
        if self.scheduled and self.sources_seen > 1:
            if len(self.buffer) == 0:
                raise NoBuffer(f"{self.kind} needs a populated buffer after source 1")
            self.period = schedule_period(total_steps, len(self.buffer))
        else:
            self.period = None

    def advance(self):
        self.step_index += 1

    def _anchored(self, loss_curr, params):
        if self.importance == 0.0 or self.theta_star is None:
            return loss_curr
        return tg.add(
            loss_curr,
            ewc_penalty(params, self.theta_star, self.fisher_diag, self.importance),
        )

    def _replay_batch(self, sample_index, task):
        sample, _ = self.buffer.entries[sample_index]
        return collate([sample], task)

    def step_loss(self, model, batch, loss_fn, rng) -> Tensor:
        """Loss for the current optimizer step under this strategy."""
        loss_curr = loss_fn(model, batch, "train", rng)
        s = self.sources_seen
        if s == 1 or self.kind == "baseline":
            return loss_curr
        params = model.parameter_tensors()
        if self.kind == "ewc":
            return self._anchored(loss_curr, params)
        if len(self.buffer) == 0:
            raise NoBuffer(f"{self.kind} at s={s} with an empty buffer")
        if self.kind == "replay":
            pick = int(self.rng.integers(len(self.buffer)))
            loss_rep = loss_fn(model, self._replay_batch(pick, batch.task), "train", rng)
            return traditional_replay_loss(loss_curr, loss_rep, s)
        # adjusted_replay / combined follow the periodic schedule
        j = adjusted_schedule(self.step_index, self.steps_in_source, len(self.buffer))
        base = self._anchored(loss_curr, params) if self.kind == "combined" else loss_curr
        if j is None:
            return base
        loss_rep = loss_fn(model, self._replay_batch(j, batch.task), "train", rng)
        return adjusted_replay_loss(base, loss_rep, s)

    def finish_source(self, model, source_samples, source_id: str, loss_fn, task: str):
        """Snapshot after a source: buffer refresh, anchor, Fisher, s += 1."""
        if self.uses_buffer:
            self.buffer.update(source_samples, source_id)
        if self.uses_anchor:
            self.theta_star = model.params.flatten()
            self.fisher_diag = fisher_diagonal(
                model, self.buffer, loss_fn, task, mode=self.fisher_mode
            )
        self.sources_seen += 1
        self.step_index = 0
        self.steps_in_source = None
        self.period = None
        return self


def make_strategy(kind, buffer_capacity, importance, seed, fisher_mode="per_sample") -> StrategyState:
    base = np.random.SeedSequence([seed, 0x57A7])
    buf_rng, draw_rng = (np.random.default_rng(s) for s in base.spawn(2))
    return StrategyState(
        kind=kind,
        buffer=MemoryBuffer(capacity=buffer_capacity, rng=buf_rng),
        importance=importance if kind in ("ewc", "combined") else 0.0,
        fisher_mode=fisher_mode,
        rng=draw_rng,
    )


# --- serialization alongside checkpoints ----------------------------------------------


def save_strategy_state(state: StrategyState, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": state.kind,
        "importance": state.importance,
        "fisher_mode": state.fisher_mode,
        "sources_seen": state.sources_seen,
        "buffer_capacity": state.buffer.capacity,
        "buffer_entries": len(state.buffer),
        "buffer_episode_ids": [s.episode_id for s, _ in state.buffer.entries],
        "has_anchor": state.theta_star is not None,
    }
    (directory / "strategy.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if state.theta_star is not None:
        (directory / "theta_star.bin").write_bytes(state.theta_star.astype("<f8").tobytes())
        (directory / "fisher.bin").write_bytes(state.fisher_diag.astype("<f8").tobytes())


def export_buffer_episodes(state: StrategyState, episodes_by_id: dict, directory, schema=None):
    """Write the buffered samples' source episodes in the benchmark layout."""
    from .cohort import DEFAULT_SCHEMA
    from .episodes_io import write_episodes

    episodes = [episodes_by_id[s.episode_id] for s, _ in state.buffer.entries]
    return write_episodes(episodes, directory, schema or DEFAULT_SCHEMA)
