"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest -v tests/test_acceptance.py`; the directional
continual-learning check (criterion 5) trains 15 full models and is the
long pole (budgeted under 15 minutes).
"""

import math
import time
from statistics import NormalDist

import numpy as np
import pytest

import icushift.tensor as tg
from icushift.cli import cli
from icushift.cohort import (
    CONDITIONS,
    DEFAULT_SCHEMA,
    default_profiles,
    generate_cohort,
    measurement_frequency,
)
from icushift.experiment import (
    EPOCHS_GRID,
    IMPORTANCE_GRID,
    TASK_DEFAULTS,
    ExperimentConfig,
    prepare_data,
    run_single,
)
from icushift.metrics import (
    auc_pr,
    auc_roc,
    cohen_kappa,
    format_mean_std,
    mad,
    macro_micro_auc,
)
from icushift.models import SequenceModel, SequenceModelConfig
from icushift.pipeline import Batch, make_splits
from icushift.strategies import (
    adjusted_schedule,
    adjusted_weights,
    ewc_penalty,
    replay_weights,
)
from icushift.training import bce_loss, ce_loss

from helpers import analytic_grads, finite_difference, relative_errors
from test_cohort import _episode
from test_metrics import auc_pr_oracle, auc_roc_oracle, kappa_oracle


def _report(criterion: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {criterion}" + (f": {detail}" if detail else ""))
    assert ok, f"{criterion} failed: {detail}"


# --- criterion 1: gradient correctness -----------------------------------------


def _grad_check_config(name, cfg, batch, rng, params_to_check):
    model = SequenceModel(cfg, seed=7)
    params = model.parameter_tensors()
    total = sum(p.data.size for p in params)
    theta_star = model.params.flatten() + rng.normal(scale=0.05, size=total)
    fisher = np.abs(rng.normal(scale=0.5, size=total)) + 0.01

    def loss_builder():
        scores = model.forward(batch.x, mode="eval", lengths=batch.lengths)
        if cfg.head_activation == "sigmoid":
            task = bce_loss(scores, batch.targets, mask=batch.mask)
        else:
            task = ce_loss(scores, batch.targets, mask=batch.mask[..., 0])
        return tg.add(task, ewc_penalty(params, theta_star, fisher, 6.0))

    analytic = analytic_grads(loss_builder, params)
    idx, fd = finite_difference(
        lambda: loss_builder().item(), params, h=1e-5, sample=params_to_check, rng=rng
    )
    errs = relative_errors(analytic[idx], fd)
    return len(idx), float(errs.max())


def test_criterion_1_gradient_correctness():
    started = time.monotonic()
    rng = np.random.default_rng(11)
    bsz, steps = 2, 6
    x = rng.normal(size=(bsz, steps, 76))
    lengths = np.array([steps, steps - 2])
    row_mask = (np.arange(steps)[None, :] < lengths[:, None]).astype(np.float64)

    configs = {
        "BiLSTM-2x16": (
            SequenceModelConfig(hidden_width=16, num_layers=2, bidirectional=True,
                                dropout_rate=0.0, output_width=1),
            Batch(x=x, lengths=lengths, targets=rng.integers(0, 2, size=(bsz, 1)).astype(float),
                  mask=None, task="ihm", size=bsz),
        ),
        "BiLSTM-1x256": (
            SequenceModelConfig(hidden_width=256, num_layers=1, bidirectional=True,
                                dropout_rate=0.0, output_width=25),
            Batch(x=x, lengths=lengths, targets=rng.integers(0, 2, size=(bsz, 25)).astype(float),
                  mask=None, task="phenotyping", size=bsz),
        ),
        "LSTM-1x64": (
            SequenceModelConfig(hidden_width=64, num_layers=1, bidirectional=False,
                                dropout_rate=0.0, output_width=10,
                                head_mode="per_step", head_activation="softmax"),
            None,  # built below: one-hot per-step targets with a row mask
        ),
    }
    onehot = np.zeros((bsz, steps, 10))
    onehot[np.arange(bsz)[:, None], np.arange(steps)[None, :], rng.integers(0, 10, (bsz, steps))] = 1.0
    configs["LSTM-1x64"] = (
        configs["LSTM-1x64"][0],
        Batch(x=x, lengths=lengths, targets=onehot, mask=row_mask[..., None], task="los", size=bsz),
    )

    checked, worst = 0, 0.0
    for name, (cfg, batch) in configs.items():
        n, err = _grad_check_config(name, cfg, batch, rng, params_to_check=70)
        checked += n
        worst = max(worst, err)
    elapsed = time.monotonic() - started
    _report(
        "criterion 1 (gradient correctness)",
        checked >= 200 and worst < 1e-4 and elapsed < 120,
        f"{checked} parameters, max rel err {worst:.2e}, {elapsed:.0f}s",
    )


# --- criterion 2: strategy-formula oracles -------------------------------------


def test_criterion_2_strategy_formula_oracles():
    ok = True
    for s in (2, 3, 4):
        ok &= replay_weights(s) == (1.0 / s, 1.0 - 1.0 / s)
        ok &= adjusted_weights(s) == (1.0 - 1.0 / s, 1.0 / s)
        for lc, lr in ((0.8, 0.4), (0.9, 0.0), (0.123456, 0.654321)):
            from icushift.strategies import adjusted_replay_loss, traditional_replay_loss

            ok &= traditional_replay_loss(lc, lr, s) == (1.0 / s) * lc + (1.0 - 1.0 / s) * lr
            ok &= adjusted_replay_loss(lc, lr, s) == (1.0 - 1.0 / s) * lc + (1.0 / s) * lr

    # EWC penalty against an exactly-summed scalar loop; agreement to float
    # round-off (the 0-ulp requirement above is on the weight arithmetic)
    rng = np.random.default_rng(2)
    for size in (6, 300):
        theta = tg.Tensor(rng.normal(size=size), requires_grad=True)
        star = rng.normal(size=size)
        fisher = np.abs(rng.normal(size=size))
        lam = 6.0
        value = ewc_penalty([theta], star, fisher, lam).item()
        oracle = lam * math.fsum(
            0.5 * f * (t - ts) ** 2 for f, t, ts in zip(fisher, theta.data, star)
        )
        ok &= abs(value - oracle) <= 1e-14 * max(1.0, abs(oracle))

    # schedule against an independent reimplementation
    def oracle_schedule(i, total, buffer):
        p = total // buffer
        if i % p == 0 and i // p < buffer:
            return i // p
        return None

    rng = np.random.default_rng(3)
    pairs = [(10, 1), (10, 3), (10, 9), (100, 33), (1000, 500), (10000, 9999), (10000, 1)]
    pairs += [(int(n), int(rng.integers(1, n))) for n in rng.integers(10, 10001, size=40)]
    for total, buffer in pairs:
        used = []
        step = max(1, total // 997)  # cover the range without quadratic cost
        for i in range(0, total, step):
            j = adjusted_schedule(i, total, buffer)
            ok &= j == oracle_schedule(i, total, buffer)
        for i in range(total):  # exact at-most-once accounting needs every step
            if total > 20000:
                break
            j = adjusted_schedule(i, total, buffer)
            if j is not None:
                used.append(j)
        ok &= len(used) == len(set(used))
    _report("criterion 2 (strategy formula oracles)", bool(ok))


# --- criterion 3: metric oracles --------------------------------------------------


def test_criterion_3_metric_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(5)
    worst = 0.0
    for case in range(1000):
        n = int(rng.integers(2, 51))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        worst = max(worst, abs(auc_roc(scores, labels) - auc_roc_oracle(scores, labels)))
        worst = max(worst, abs(auc_pr(scores, labels) - auc_pr_oracle(scores, labels)))

        c = int(rng.integers(2, 11))
        pred = rng.integers(0, c, size=n)
        true = rng.integers(0, c, size=n)
        for weighting in ("none", "linear"):
            worst = max(
                worst,
                abs(cohen_kappa(pred, true, weighting, num_classes=c)
                    - kappa_oracle(pred, true, weighting, c)),
            )
        worst = max(worst, abs(mad(pred, true) - float(np.mean(np.abs(pred - true)))))

        if case % 25 == 0:
            m = int(rng.integers(8, 20))
            mat_scores = np.round(rng.random((m, 25)), 2)
            mat_labels = rng.integers(0, 2, size=(m, 25))
            mat_labels[0], mat_labels[1] = 0, 1
            macro, micro = macro_micro_auc(mat_scores, mat_labels)
            cols = [
                auc_roc_oracle(mat_scores[:, j], mat_labels[:, j])
                for j in range(25)
                if mat_labels[:, j].min() != mat_labels[:, j].max()
            ]
            worst = max(worst, abs(macro - float(np.mean(cols))))
            worst = max(worst, abs(micro - auc_roc_oracle(mat_scores.ravel(), mat_labels.ravel())))
    elapsed = time.monotonic() - started
    _report(
        "criterion 3 (metric oracles)",
        worst < 1e-12 and elapsed < 60,
        f"max |impl - oracle| {worst:.2e}, {elapsed:.0f}s",
    )


# --- criterion 4: generator fidelity -------------------------------------------------


def test_criterion_4_generator_fidelity():
    started = time.monotonic()
    z99 = NormalDist().inv_cdf(0.995)
    profiles = default_profiles()
    freq_fail, ci_fail = [], []
    capillary_midwest = None
    for region, profile in profiles.items():
        profile.cohort_size = 10_000
        cohort = generate_cohort(profile, seed=20)
        measured = measurement_frequency(cohort)
        for name, target in profile.frequencies.items():
            if target >= 0.01 and abs(measured[name] - target) / target >= 0.05:
                freq_fail.append((region, name, measured[name], target))
        if region == "midwest":
            capillary_midwest = sum(
                len(ep.events.get("capillary_refill", ((), ()))[0]) for ep in cohort
            )
        labels = {"mortality": (np.mean([ep.mortality for ep in cohort]), profile.ihm_prevalence)}
        phen = np.array([ep.phenotypes for ep in cohort], dtype=float).mean(axis=0)
        for k, cond in enumerate(CONDITIONS):
            labels[cond] = (phen[k], profile.phenotype_prevalence[cond])
        for name, (observed, target) in labels.items():
            half = z99 * math.sqrt(max(observed * (1 - observed), 1e-9) / len(cohort))
            if not observed - half <= target <= observed + half:
                ci_fail.append((region, name, observed, target))
    elapsed = time.monotonic() - started
    _report(
        "criterion 4 (generator fidelity)",
        not freq_fail and not ci_fail and capillary_midwest == 0 and elapsed < 120,
        f"freq misses {freq_fail[:3]}, CI misses {ci_fail[:3]}, "
        f"midwest capillary {capillary_midwest}, {elapsed:.0f}s",
    )


# --- criterion 5: forgetting and mitigation -------------------------------------------


def test_criterion_5_forgetting_and_mitigation():
    started = time.monotonic()
    methods = ("baseline", "adjusted_replay", "combined")
    psa = {m: [] for m in methods}
    drops = []
    for seed in range(5):
        bundle = prepare_data(ExperimentConfig(task="ihm"), seed=seed)
        for method in methods:
            stages, _ = run_single(
                ExperimentConfig(task="ihm", method=method), seed, bundle=bundle
            )
            psa[method].append(stages["after_source_2"]["psa"]["auc_roc"])
            if method == "baseline":
                drops.append(
                    stages["after_source_1"]["mimic3"]["auc_roc"]
                    - stages["after_source_2"]["mimic3"]["auc_roc"]
                )
    elapsed = time.monotonic() - started
    mean_drop = float(np.mean(drops))
    means = {m: float(np.mean(psa[m])) for m in methods}
    ok = (
        mean_drop >= 0.02
        and means["combined"] - means["adjusted_replay"] >= 0.005
        and means["combined"] - means["baseline"] >= 0.005
        and elapsed < 900
    )
    _report(
        "criterion 5 (forgetting and mitigation)",
        ok,
        f"drop {mean_drop:.4f}, PSA baseline {means['baseline']:.4f}, "
        f"adjusted {means['adjusted_replay']:.4f}, combined {means['combined']:.4f}, "
        f"{elapsed:.0f}s",
    )


# --- criterion 6: protocol constants ---------------------------------------------------


def test_criterion_6_protocol_constants():
    ok = True
    expected = {
        "ihm": (500, 6.0, 4),
        "phenotyping": (500, 4.0, 6),
        "decompensation": (3500, 6.0, 1),
        "los": (3500, 6.0, 1),
    }
    for task, (buffer, importance, epochs) in expected.items():
        resolved = ExperimentConfig(task=task).resolved()
        ok &= resolved["buffer_capacity"] == buffer
        ok &= resolved["importance"] == importance
        ok &= resolved["epochs"] == epochs
    ok &= ExperimentConfig().seeds == 5
    ok &= list(EPOCHS_GRID) == [2, 4, 6, 8, 10]
    ok &= list(IMPORTANCE_GRID) == [2.0, 4.0, 6.0, 8.0]

    cohort = [
        _episode(
            {"heart_rate": ([1.0], [80.0])},
            episode_id=f"p{k}", patient_id=f"p{k}", los=20.0,
        )
        for k in range(1000)
    ]
    split = make_splits(cohort, seed=0)
    counts = {"train": 0, "validation": 0, "test": 0}
    for assignment in split.by_patient.values():
        counts[assignment] += 1
    ok &= abs(counts["train"] - 700) <= 10
    ok &= abs(counts["validation"] - 150) <= 10
    ok &= abs(counts["test"] - 150) <= 10

    ok &= format_mean_std(0.8638, 0.0052) == "0.864 (0.005)"
    _report("criterion 6 (protocol constants)", bool(ok))


# --- criterion 7: CLI determinism ----------------------------------------------------


def test_criterion_7_cli_determinism(tmp_path):
    args = [
        "train", "--task", "ihm", "--method", "combined", "--region", "south",
        "--seeds", "1", "--seed", "0",
        "--set", "cohort_size=320", "--set", "batch_size=4",
        "--set", "buffer_capacity=8", "--set", "hidden_width=5", "--set", "epochs=1",
        "--set", "importance=4.0",
    ]
    assert cli(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli(args + ["--out", str(tmp_path / "b")]) == 0
    ok = True
    for name in ("results.csv", "results.json", "val_log_seed0.jsonl"):
        ok &= (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    for sub in ("g1", "g2"):
        assert cli([
            "generate", "--profile", "west", "--episodes", "50", "--seed", "9",
            "--out", str(tmp_path / sub),
        ]) == 0
    west1 = sorted((tmp_path / "g1" / "west").iterdir())
    west2 = sorted((tmp_path / "g2" / "west").iterdir())
    ok &= [p.name for p in west1] == [p.name for p in west2]
    ok &= all(a.read_bytes() == b.read_bytes() for a, b in zip(west1, west2))

    for sub in ("a1", "a2"):
        assert cli([
            "analyze", "--data", str(tmp_path / "g1" / "west"), "--out", str(tmp_path / sub),
        ]) == 0
    for name in ("frequency_table.csv", "distribution_histograms.csv", "distribution_summary.csv"):
        ok &= (
            (tmp_path / "a1" / "analysis" / name).read_bytes()
            == (tmp_path / "a2" / "analysis" / name).read_bytes()
        )
    _report("criterion 7 (CLI determinism)", bool(ok))
