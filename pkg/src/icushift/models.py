"""Stacked (bi)directional LSTM sequence classifiers.

Architecture: one or more LSTM layers (each optionally bidirectional, the
two directions' hidden states concatenated per step), inter-layer dropout
only when there is more than one layer, then a linear head.  The head
either consumes the final representation of the sequence (`last_step`) or
every step (`per_step`), followed by a sigmoid (binary / multi-label) or a
row softmax (multi-class).

For a bidirectional stack the `last_step` representation concatenates each
direction's own final state: the forward state after the last valid step
and the backward state after reading the whole sequence (its output at
step 0).  Variable-length batches are padded; the backward direction
reverses each sequence within its own valid length, so padding never
leaks into valid positions.

Gate layout inside every fused weight matrix is four contiguous blocks in
the order input, forget, cell, output.  The flattened parameter vector
(the ordering Fisher diagonals, parameter snapshots, and checkpoints rely
on) is, for each layer then each direction (forward first): W_x
(input_width x 4H), W_h (H x 4H), b (4H), each raveled row-major, followed
by the head weight (feature_width x output_width) and head bias.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tg
from .errors import EmptySequence, ShapeMismatch
from .tensor import Tensor

GATES = 4  # input, forget, cell, output


@dataclass
class SequenceModelConfig:
    input_width: int = 76
    hidden_width: int = 16
    num_layers: int = 1
    bidirectional: bool = False
    dropout_rate: float = 0.3
    output_width: int = 1
    head_mode: str = "last_step"  # or "per_step"
    head_activation: str = "sigmoid"  # or "softmax"

    def __post_init__(self):
        if self.head_mode not in ("last_step", "per_step"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.head_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown head_activation {self.head_activation!r}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def feature_width(self) -> int:
        return self.hidden_width * self.directions

    def layer_input_width(self, layer: int) -> int:
        return self.input_width if layer == 0 else self.feature_width

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "hidden_width": self.hidden_width,
            "num_layers": self.num_layers,
            "bidirectional": self.bidirectional,
            "dropout_rate": self.dropout_rate,
            "output_width": self.output_width,
            "head_mode": self.head_mode,
            "head_activation": self.head_activation,
        }


@dataclass
class ModelParams:
    """Parameter tensors in the documented flattened order."""

    layers: list = field(default_factory=list)  # [layer][direction] -> (W_x, W_h, b)
    head_w: Tensor = None
    head_b: Tensor = None

    def tensors(self) -> list:
        out = []
        for layer in self.layers:
            for (w_x, w_h, b) in layer:
                out.extend((w_x, w_h, b))
        out.append(self.head_w)
        out.append(self.head_b)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def load_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(t.data.size for t in self.tensors())
        if vec.size != expected:
            raise ShapeMismatch(f"flat vector has {vec.size} values, expected {expected}")
        pos = 0
        for t in self.tensors():
            n = t.data.size
            t.data[...] = vec[pos : pos + n].reshape(t.data.shape)
            pos += n

    def zero_grads(self):
        for t in self.tensors():
            t.grad = None


class SequenceModel:
    """Config + parameters + forward pass."""

    def __init__(self, config: SequenceModelConfig, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed)
        self.seed = seed

    def forward(self, batch, mode: str = "eval", rng=None, lengths=None) -> Tensor:
        return forward(self.config, self.params, batch, mode=mode, rng=rng, lengths=lengths)

    def parameter_tensors(self) -> list:
        return self.params.tensors()


def init_params(config: SequenceModelConfig, seed: int) -> ModelParams:
    """Uniform init in +-1/sqrt(hidden_width), seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1C0, seed]))
    bound = 1.0 / np.sqrt(config.hidden_width)
    h = config.hidden_width

    def uniform(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    layers = []
    for layer in range(config.num_layers):
        d_in = config.layer_input_width(layer)
        directions = []
        for _ in range(config.directions):
            directions.append((uniform((d_in, GATES * h)), uniform((h, GATES * h)), uniform(GATES * h)))
        layers.append(directions)
    head_w = uniform((config.feature_width, config.output_width))
    head_b = uniform(config.output_width)
    return ModelParams(layers=layers, head_w=head_w, head_b=head_b)


# --- single cell step, composed from generic tape ops -------------------------


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step on a (B, D_in) slice; returns (h_t, c_t).

    Kept as a composition of generic ops so the fused layer below has an
    independently differentiable reference implementation.
    """
    h = h_prev.shape[-1]
    if x_t.shape[0] != h_prev.shape[0] or h_prev.shape != c_prev.shape:
        raise ShapeMismatch(
            f"cell step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape}"
        )
    pre = tg.add_bias(tg.add(tg.matmul(x_t, w_x), tg.matmul(h_prev, w_h)), b)
    i = tg.sigmoid(tg.slice_axis(pre, -1, 0, h))
    f = tg.sigmoid(tg.slice_axis(pre, -1, h, 2 * h))
    g = tg.tanh(tg.slice_axis(pre, -1, 2 * h, 3 * h))
    o = tg.sigmoid(tg.slice_axis(pre, -1, 3 * h, 4 * h))
    c_t = tg.add(tg.mul(f, c_prev), tg.mul(i, g))
    h_t = tg.mul(o, tg.tanh(c_t))
    return h_t, c_t


# --- fused full-sequence layer --------------------------------------------------


def lstm_layer(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run a full (B, T, D_in) sequence through one LSTM direction.

    Single tape node with an analytic BPTT backward; equals a loop of
    `lstm_cell_step` to float64 round-off (asserted in the test suite).
    The sigmoid gates are computed as 0.5 * (1 + tanh(x / 2)) with the
    halving folded into the weights, so each step is one `tanh` over the
    fused gate block instead of separate branchy sigmoids.
    """
    bsz, steps, d_in = x.data.shape
    h = w_h.data.shape[0]
    if w_x.data.shape != (d_in, GATES * h) or b.data.shape != (GATES * h,):
        raise ShapeMismatch(
            f"lstm_layer: x {x.data.shape}, w_x {w_x.data.shape}, "
            f"w_h {w_h.data.shape}, b {b.data.shape}"
        )
    col_scale = np.ones(GATES * h)
    col_scale[: 2 * h] = 0.5
    col_scale[3 * h :] = 0.5
    post_mul = np.where(col_scale == 0.5, 0.5, 1.0)
    post_add = np.where(col_scale == 0.5, 0.5, 0.0)
    w_x_s = w_x.data * col_scale
    w_h_s = w_h.data * col_scale
    b_s = b.data * col_scale

    x_proj = (x.data.reshape(bsz * steps, d_in) @ w_x_s + b_s).reshape(bsz, steps, GATES * h)
    acts = np.empty((bsz, steps, GATES * h))
    cs = np.empty((bsz, steps, h))
    tc = np.empty((bsz, steps, h))
    hs = np.empty((bsz, steps, h))

    h_t = np.zeros((bsz, h))
    c_t = np.zeros((bsz, h))
    for t in range(steps):
        pre = x_proj[:, t, :] + h_t @ w_h_s
        np.tanh(pre, out=pre)
        a_t = acts[:, t, :]
        np.multiply(pre, post_mul, out=a_t)
        a_t += post_add
        c_t = a_t[:, h : 2 * h] * c_t
        c_t += a_t[:, :h] * a_t[:, 2 * h : 3 * h]
        tct = np.tanh(c_t)
        h_t = a_t[:, 3 * h :] * tct
        cs[:, t], tc[:, t], hs[:, t] = c_t, tct, h_t

    out = Tensor(hs)

    def bwd(grad_h):
        # activation derivatives w.r.t. the scaled preactivation, all steps at once
        deriv = np.empty_like(acts)
        np.multiply(acts, acts, out=deriv)
        np.subtract(acts, deriv, out=deriv)  # a - a^2
        deriv *= 2.0
        gg = acts[:, :, 2 * h : 3 * h]
        np.multiply(gg, gg, out=deriv[:, :, 2 * h : 3 * h])
        np.subtract(1.0, deriv[:, :, 2 * h : 3 * h], out=deriv[:, :, 2 * h : 3 * h])
        dtc = 1.0 - tc * tc

        dpre = np.empty((bsz, steps, GATES * h))
        dgates = np.empty((bsz, GATES * h))
        dh_next = np.zeros((bsz, h))
        dc_next = np.zeros((bsz, h))
        zeros = np.zeros((bsz, h))
        w_h_sT = w_h_s.T
        for t in range(steps - 1, -1, -1):
            a_t = acts[:, t]
            dh = grad_h[:, t, :] + dh_next
            dc = dh * a_t[:, 3 * h :]
            dc *= dtc[:, t]
            dc += dc_next
            c_prev = cs[:, t - 1] if t > 0 else zeros
            np.multiply(dc, a_t[:, 2 * h : 3 * h], out=dgates[:, :h])
            np.multiply(dc, c_prev, out=dgates[:, h : 2 * h])
            np.multiply(dc, a_t[:, :h], out=dgates[:, 2 * h : 3 * h])
            np.multiply(dh, tc[:, t], out=dgates[:, 3 * h :])
            np.multiply(dgates, deriv[:, t], out=dpre[:, t])
            dh_next = dpre[:, t] @ w_h_sT
            dc_next = dc * a_t[:, h : 2 * h]

        dpre_2d = dpre.reshape(bsz * steps, GATES * h)
        dx = None
        if x.requires_grad:
            dx = (dpre_2d @ w_x_s.T).reshape(bsz, steps, d_in)
        dw_x = None
        if w_x.requires_grad:
            dw_x = x.data.reshape(bsz * steps, d_in).T @ dpre_2d
            dw_x *= col_scale
        dw_h = None
        if w_h.requires_grad:
            h_prev = np.concatenate([np.zeros((bsz, 1, h)), hs[:, :-1]], axis=1)
            dw_h = h_prev.reshape(bsz * steps, h).T @ dpre_2d
            dw_h *= col_scale
        db = None
        if b.requires_grad:
            db = dpre_2d.sum(axis=0)
            db *= col_scale
        return dx, dw_x, dw_h, db

    return tg.record(out, (x, w_x, w_h, b), bwd)


def reverse_within_lengths(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each sequence inside its valid prefix, leaving padding in place."""
    bsz, steps = x.data.shape[0], x.data.shape[1]
    idx = np.tile(np.arange(steps), (bsz, 1))
    valid = idx < lengths[:, None]
    rev = np.where(valid, lengths[:, None] - 1 - idx, idx)
    rows = np.arange(bsz)[:, None]
    out = Tensor(np.ascontiguousarray(x.data[rows, rev]))

    def bwd(g):
        back = np.zeros_like(x.data)
        np.add.at(back, (rows, rev), g)
        return (back,)

    return tg.record(out, (x,), bwd)


def gather_steps(x: Tensor, step_idx: np.ndarray) -> Tensor:
    """Pick one step per batch row from a (B, T, D) tensor."""
    rows = np.arange(x.data.shape[0])
    out = Tensor(np.ascontiguousarray(x.data[rows, step_idx]))

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, step_idx), g)
        return (full,)

    return tg.record(out, (x,), bwd)


# --- full forward ------------------------------------------------------------


def forward(
    config: SequenceModelConfig,
    params: ModelParams,
    batch,
    mode: str = "eval",
    rng=None,
    lengths=None,
) -> Tensor:
    """Score a (B, T, input_width) batch.

    Returns (B, output_width) for `last_step`, (B, T, output_width) for
    `per_step`.  `lengths` marks each sequence's valid prefix; padding
    beyond it never influences valid outputs.  Dropout fires only in
    train mode and only when num_layers > 1.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 3 or x.data.shape[2] != config.input_width:
        raise ShapeMismatch(
            f"forward expects (B, T, {config.input_width}), got {x.data.shape}"
        )
    bsz, steps = x.data.shape[0], x.data.shape[1]
    if steps == 0:
        raise EmptySequence("forward on an empty (T=0) sequence")
    if lengths is None:
        lengths = np.full(bsz, steps, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
    use_dropout = mode == "train" and config.num_layers > 1 and config.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")

    h = x
    for layer_idx, directions in enumerate(params.layers):
        fwd_out = lstm_layer(h, *directions[0])
        if config.bidirectional:
            rev_in = reverse_within_lengths(h, lengths)
            rev_out = lstm_layer(rev_in, *directions[1])
            bwd_out = reverse_within_lengths(rev_out, lengths)
            h = tg.concat_last_dim(fwd_out, bwd_out)
        else:
            h = fwd_out
        if use_dropout and layer_idx < config.num_layers - 1:
            h = tg.dropout(h, config.dropout_rate, "train", rng)

    if config.head_mode == "last_step":
        last_fwd = gather_steps(
            tg.slice_axis(h, -1, 0, config.hidden_width) if config.bidirectional else h,
            lengths - 1,
        )
        if config.bidirectional:
            first_bwd = gather_steps(
                tg.slice_axis(h, -1, config.hidden_width, config.feature_width),
                np.zeros(bsz, dtype=np.int64),
            )
            rep = tg.concat_last_dim(last_fwd, first_bwd)
        else:
            rep = last_fwd
        if use_dropout:
            rep = tg.dropout(rep, config.dropout_rate, "train", rng)
        logits = tg.add_bias(tg.matmul(rep, params.head_w), params.head_b)
    else:
        flat = tg.reshape(h, (bsz * steps, config.feature_width))
        if use_dropout:
            flat = tg.dropout(flat, config.dropout_rate, "train", rng)
        logits = tg.add_bias(tg.matmul(flat, params.head_w), params.head_b)
        logits = tg.reshape(logits, (bsz, steps, config.output_width))

    if config.head_activation == "sigmoid":
        return tg.sigmoid(logits)
    return tg.softmax_last_dim(logits)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: SequenceModel, directory, source_history=None, extra=None):
    """JSON manifest + raw little-endian float64 blob in flattened order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = model.params.flatten()
    manifest = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "source_history": list(source_history or []),
        "parameter_count": int(flat.size),
        "byte_order": "little",
        "dtype": "float64",
    }
    if extra:
        manifest["extra"] = extra
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "params.bin").write_bytes(flat.astype("<f8").tobytes())


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    config = SequenceModelConfig(**manifest["config"])
    model = SequenceModel(config, seed=manifest["seed"])
    raw = (directory / "params.bin").read_bytes()
    count = manifest["parameter_count"]
    flat = np.array(struct.unpack(f"<{count}d", raw), dtype=np.float64)
    model.params.load_flat(flat)
    return model, manifest
