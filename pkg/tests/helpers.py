"""Shared oracles for the test suite: finite differences and scalar recomputations."""

import numpy as np

from icushift import tensor as tg


def finite_difference(loss_fn, params, h=1e-5, sample=None, rng=None):
    """Central finite differences of a scalar loss w.r.t. flat parameter entries.

    `loss_fn()` must recompute the loss from the current contents of
    `params` (a list of tensors).  Returns (flat_indices, fd_grads).
    """
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    if sample is None:
        indices = np.arange(total)
    else:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(total, size=min(sample, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    grads = np.empty(len(indices))
    for k, flat_idx in enumerate(indices):
        p_idx = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        offset = int(flat_idx - bounds[p_idx])
        flat_view = params[p_idx].data.reshape(-1)
        orig = flat_view[offset]
        flat_view[offset] = orig + h
        up = loss_fn()
        flat_view[offset] = orig - h
        down = loss_fn()
        flat_view[offset] = orig
        grads[k] = (up - down) / (2.0 * h)
    return indices, grads


def analytic_grads(loss_builder, params):
    """Run one taped forward/backward; returns the flat analytic gradient."""
    for p in params:
        p.grad = None
    with tg.Tape() as tape:
        loss = loss_builder()
        tg.backward(loss, tape)
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )


def relative_errors(analytic, numeric, floor=1e-7):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
