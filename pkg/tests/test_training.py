import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icushift import tensor as tg
from icushift.errors import (
    EmptySource,
    MissingGradient,
    NotNormalized,
    ShapeMismatch,
)
from icushift.models import SequenceModel, SequenceModelConfig
from icushift.pipeline import TaskSample
from icushift.strategies import make_strategy
from icushift.tensor import Tape, Tensor
from icushift.training import (
    Adam,
    TrainConfig,
    apply_sample_cap,
    bce_loss,
    ce_categorical_loss,
    ce_loss,
    evaluate,
    train_on_source,
)


def _scalar_bce(scores, targets):
    eps = 1e-12
    total = 0.0
    for p, y in zip(scores, targets):
        p = min(max(p, eps), 1 - eps)
        total += y * math.log(p) + (1 - y) * math.log(1 - p)
    return -total / len(scores)


def test_bce_half_score_is_log_two():
    assert bce_loss(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction_is_tiny():
    assert bce_loss(Tensor([1.0, 0.0]), [1.0, 0.0]).item() <= 1e-11


def test_bce_matches_scalar_recomputation():
    # -1/2 (log .9 + log .9) = 0.10536051565782628
    value = bce_loss(Tensor([0.9, 0.1]), [1.0, 0.0]).item()
    assert value == pytest.approx(_scalar_bce([0.9, 0.1], [1, 0]), abs=1e-15)
    assert value == pytest.approx(0.105361, abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss(Tensor([0.5, 0.5]), [1.0])


def _scalar_ce(rows, onehot):
    eps = 1e-12
    total = 0.0
    for row, ys in zip(rows, onehot):
        for p, y in zip(row, ys):
            p = min(max(p, eps), 1 - eps)
            total += y * math.log(p) + (1 - y) * math.log(1 - p)
    return -total / len(rows)


def test_ce_uniform_scores_oracle_value():
    scores = np.full((1, 10), 0.1)
    onehot = np.zeros((1, 10))
    onehot[0, 3] = 1.0
    expected = _scalar_ce(scores, onehot)  # -log .1 - 9 log .9 = 3.2508297339144845
    assert expected == pytest.approx(3.2508297339144845, abs=1e-12)
    assert ce_loss(Tensor(scores), onehot).item() == pytest.approx(expected, abs=1e-12)


def test_ce_perfect_one_hot_is_tiny():
    scores = np.zeros((2, 4))
    scores[0, 1] = 1.0
    scores[1, 2] = 1.0
    assert ce_loss(Tensor(scores), scores.copy()).item() <= 1e-10


def test_ce_two_class_reduces_to_twice_bce():
    p = np.array([[0.3, 0.7], [0.85, 0.15]])
    onehot = np.array([[1.0, 0.0], [1.0, 0.0]])
    ce = ce_loss(Tensor(p), onehot).item()
    bce = bce_loss(Tensor(p[:, 0]), onehot[:, 0]).item()
    assert ce == pytest.approx(2.0 * bce, rel=1e-12)


def test_ce_rejects_unnormalized_rows():
    with pytest.raises(NotNormalized):
        ce_loss(Tensor([[0.5, 0.6]]), [[1.0, 0.0]])


def test_ce_categorical_option():
    scores = np.array([[0.25, 0.75]])
    onehot = np.array([[0.0, 1.0]])
    assert ce_categorical_loss(Tensor(scores), onehot).item() == pytest.approx(
        -math.log(0.75), abs=1e-12
    )


@settings(max_examples=30)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=6), st.data())
def test_losses_are_non_negative(probs, data):
    labels = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(probs), max_size=len(probs)))
    assert bce_loss(Tensor(probs), labels).item() >= 0.0


def test_ce_masked_rows_average():
    scores = np.array([[[0.2, 0.8], [0.6, 0.4]]])
    onehot = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    mask = np.array([[1.0, 0.0]])
    only_first = ce_loss(Tensor(scores), onehot, mask=mask).item()
    direct = _scalar_ce(scores[0][:1], onehot[0][:1])
    assert only_first == pytest.approx(direct, abs=1e-12)


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    before = p.data.copy()
    p.grad = np.zeros(2)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, before)
    assert np.all(np.abs(opt.state.m) < 1e-12)


def test_adam_first_step_magnitude_is_lr():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.05)
    p.grad = np.array([3.7])
    opt.step()
    # bias-corrected unit step: |delta| = lr * g/|g| (up to eps)
    assert abs(p.data[0] + 0.05) < 1e-6


def _scalar_adam_on_square(theta0, lr, steps):
    m = v = 0.0
    theta = theta0
    trace = []
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        theta -= lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        trace.append(theta)
    return trace


def test_adam_descends_on_square_matching_scalar_oracle():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    oracle = _scalar_adam_on_square(1.0, 0.1, 10)
    prev = 1.0
    for k in range(10):
        p.grad = None
        with Tape() as tape:
            tg.backward(tg.sum_all(tg.mul(p, p)), tape)
        opt.step()
        assert abs(p.data[0]) < abs(prev)
        assert p.data[0] == pytest.approx(oracle[k], abs=1e-12)
        prev = p.data[0]


def test_adam_missing_gradient():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(MissingGradient):
        Adam([p]).step()


# --- the source loop ----------------------------------------------------------


def _toy_samples(n, seed, sep=2.0, width=6, steps=5):
    """Linearly separable per-episode task: label from the mean of channel 0."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        label = float(k % 2)
        x = rng.normal(size=(steps, width)) * 0.3
        x[:, 0] += sep * (label - 0.5)
        samples.append(
            TaskSample(input=x, task="ihm", target=label, episode_id=f"e{k}", source_id="src")
        )
    return samples


def _toy_model(width=6, seed=0):
    cfg = SequenceModelConfig(
        input_width=width, hidden_width=5, num_layers=1, bidirectional=False,
        dropout_rate=0.0, output_width=1, head_mode="last_step", head_activation="sigmoid",
    )
    return SequenceModel(cfg, seed=seed)


def _param_digest(model):
    return hashlib.sha256(model.params.flatten().tobytes()).hexdigest()


def test_train_descends_on_separable_source():
    samples = _toy_samples(64, seed=1)
    model = _toy_model(seed=2)
    strategy = make_strategy("baseline", buffer_capacity=8, importance=0.0, seed=0)
    from icushift.training import task_loss

    loss_fn = task_loss("ihm")
    from icushift.pipeline import collate

    batch = collate(samples, "ihm")
    before = loss_fn(model, batch, "eval", None).item()
    train_on_source(model, samples, TrainConfig(task="ihm", epochs=3, batch_size=8, seed=0), strategy)
    after = loss_fn(model, batch, "eval", None).item()
    assert after < before


def test_baseline_step_loss_equals_plain_task_loss():
    samples = _toy_samples(8, seed=3)
    model = _toy_model(seed=4)
    strategy = make_strategy("baseline", buffer_capacity=4, importance=0.0, seed=0)
    strategy.begin_source(10)
    from icushift.pipeline import collate
    from icushift.training import task_loss

    batch = collate(samples, "ihm")
    fn = task_loss("ihm")
    with Tape():
        via_strategy = strategy.step_loss(model, batch, fn, None)
        plain = fn(model, batch, "train", None)
    assert via_strategy.item() == plain.item()


def test_sample_cap_exact_for_episode_and_step_tasks():
    rng = np.random.default_rng(0)
    episode_task = _toy_samples(50, seed=5)
    capped = apply_sample_cap(episode_task, 20, rng)
    assert len(capped) == 20

    per_step = []
    for k in range(10):
        mask = np.ones(7)
        per_step.append(
            TaskSample(
                input=np.zeros((7, 4)), task="decompensation", target=np.zeros(7),
                episode_id=f"p{k}", source_id="s", step_mask=mask,
            )
        )
    capped = apply_sample_cap(per_step, 24, np.random.default_rng(1))
    assert sum(s.label_count for s in capped) == 24


def test_training_is_bitwise_deterministic():
    def run():
        samples = _toy_samples(32, seed=6)
        model = _toy_model(seed=7)
        strategy = make_strategy("baseline", buffer_capacity=4, importance=0.0, seed=3)
        train_on_source(model, samples, TrainConfig(task="ihm", epochs=2, batch_size=8, seed=3), strategy)
        return _param_digest(model)

    assert run() == run()


def test_validation_does_not_mutate_parameters_and_logs_every_epoch():
    samples = _toy_samples(24, seed=8)
    val = _toy_samples(16, seed=9)
    model = _toy_model(seed=10)
    strategy = make_strategy("baseline", buffer_capacity=4, importance=0.0, seed=0)
    sink = []
    log = train_on_source(
        model, samples, TrainConfig(task="ihm", epochs=2, batch_size=8, seed=0),
        strategy, validation_sets=[("src", val)], log_sink=sink.append,
    )
    digest_after_training = _param_digest(model)
    evaluate(model, val, "ihm")
    assert _param_digest(model) == digest_after_training
    assert sink == log
    epochs_logged = {entry["epoch"] for entry in log}
    assert epochs_logged == {1, 2}
    assert {e["metric"] for e in log} == {"auc_roc", "auc_pr"}
    assert all(set(e) == {"source", "epoch", "metric", "value"} for e in log)


def test_empty_source_raises():
    model = _toy_model()
    strategy = make_strategy("baseline", buffer_capacity=4, importance=0.0, seed=0)
    with pytest.raises(EmptySource):
        train_on_source(model, [], TrainConfig(task="ihm"), strategy)
