import numpy as np
import pytest

from icushift.cohort import DEFAULT_SCHEMA, EpisodeRecord, default_profiles, generate_cohort
from icushift.episodes_io import read_episodes, write_episodes
from icushift.errors import SchemaMismatch, TooShort
from icushift.pipeline import (
    Normalizer,
    SplitAssignment,
    apply_exclusions,
    build_task_samples,
    collate,
    discretize_episode,
    extract_decompensation,
    extract_ihm,
    extract_los,
    extract_phenotyping,
    los_class,
    make_splits,
)


def _episode(events=None, los=60.0, **kw):
    events = events or {"heart_rate": (np.linspace(0, los * 0.9, 20), np.full(20, 85.0))}
    base = dict(
        patient_id="p0", episode_id="e0", region="mimic3", age=40, los_hours=los,
        events={k: (np.asarray(t, dtype=float), np.asarray(v, dtype=float)) for k, (t, v) in events.items()},
        mortality=False, death_hour=None, phenotypes=np.zeros(25, dtype=np.uint8),
    )
    base.update(kw)
    return EpisodeRecord(**base)


# --- exclusions -----------------------------------------------------------------


def test_ihm_exclusion_below_48h():
    short = _episode(los=47.9)
    long = _episode(los=48.0, episode_id="e1")
    kept = apply_exclusions([short, long], "ihm")
    assert [ep.episode_id for ep in kept] == ["e1"]


def test_record_count_exclusion():
    few = _episode({"heart_rate": (np.linspace(0, 50, 14), np.full(14, 80.0))})
    kept = apply_exclusions([few], "ihm")
    assert kept == []
    for task in ("decompensation", "los", "phenotyping"):
        assert apply_exclusions([few], task) == []


def test_age_18_exactly_included():
    adult = _episode(age=18)
    minor = _episode(age=17, episode_id="e1")
    kept = apply_exclusions([adult, minor], "phenotyping")
    assert [ep.episode_id for ep in kept] == ["e0"]


def test_inconsistent_labels_excluded():
    bad = _episode(label_consistent=False)
    assert apply_exclusions([bad], "ihm") == []


def test_per_step_minimum_stay():
    short = _episode(los=4.5)
    ok = _episode(los=5.0, episode_id="e1")
    kept = apply_exclusions([short, ok], "decompensation")
    assert [ep.episode_id for ep in kept] == ["e1"]


# --- discretization -----------------------------------------------------------------


def test_last_value_in_bin_wins():
    ep = _episode({"heart_rate": ([0.2, 0.8], [5.0, 7.0])}, los=3.0)
    mat = discretize_episode(ep, horizon=3)
    offsets = DEFAULT_SCHEMA.value_offsets()
    hr_col = offsets["heart_rate"]
    hr_mask = DEFAULT_SCHEMA.mask_offset(DEFAULT_SCHEMA.names.index("heart_rate"))
    assert mat[0, hr_col] == 7.0
    assert mat[0, hr_mask] == 1.0


def test_forward_fill_and_mask():
    ep = _episode({"heart_rate": ([0.5], [91.0])}, los=4.0)
    mat = discretize_episode(ep, horizon=4)
    offsets = DEFAULT_SCHEMA.value_offsets()
    hr_col = offsets["heart_rate"]
    hr_mask = DEFAULT_SCHEMA.mask_offset(DEFAULT_SCHEMA.names.index("heart_rate"))
    assert np.all(mat[:, hr_col] == 91.0)
    assert mat[0, hr_mask] == 1.0
    assert np.all(mat[1:, hr_mask] == 0.0)


def test_never_recorded_channel_uses_normal_value():
    ep = _episode({"heart_rate": ([0.5], [91.0])}, los=2.0)
    mat = discretize_episode(ep, horizon=2)
    offsets = DEFAULT_SCHEMA.value_offsets()
    glucose = DEFAULT_SCHEMA.by_name("glucose")
    col = offsets["glucose"]
    assert np.all(mat[:, col] == glucose.normal_value)
    g_mask = DEFAULT_SCHEMA.mask_offset(DEFAULT_SCHEMA.names.index("glucose"))
    assert np.all(mat[:, g_mask] == 0.0)


def test_one_hot_blocks_are_indicator_rows():
    ep = _episode(
        {"gcs_total": ([0.3, 1.2], [10.0, 15.0]), "heart_rate": ([0.1], [80.0])}, los=3.0
    )
    mat = discretize_episode(ep, horizon=3)
    offsets = DEFAULT_SCHEMA.value_offsets()
    gcs = DEFAULT_SCHEMA.by_name("gcs_total")
    block = mat[:, offsets["gcs_total"] : offsets["gcs_total"] + gcs.width]
    assert np.all(block.sum(axis=1) == 1.0)
    assert block[0, gcs.categories.index(10.0)] == 1.0
    assert block[1, gcs.categories.index(15.0)] == 1.0
    assert block[2, gcs.categories.index(15.0)] == 1.0  # forward fill


def test_unknown_categorical_value_is_schema_mismatch():
    ep = _episode({"gcs_total": ([0.5], [2.0])}, los=2.0)  # 2 not a category (3..15)
    with pytest.raises(SchemaMismatch):
        discretize_episode(ep, horizon=2)


def test_mask_block_binary_and_positions():
    cohort = generate_cohort(default_profiles()["south"], seed=8)[:5]
    for ep in cohort:
        mat = discretize_episode(ep)
        masks = mat[:, DEFAULT_SCHEMA.value_width :]
        assert masks.shape[1] == 17
        assert set(np.unique(masks)) <= {0.0, 1.0}


def test_horizon_above_stay_is_too_short():
    ep = _episode(los=10.0)
    with pytest.raises(TooShort):
        discretize_episode(ep, horizon=11)


def test_normalizer_frozen_constants():
    ep1 = _episode({"heart_rate": ([0.5, 1.5], [100.0, 100.0])}, los=2.0)
    ep2 = _episode({"heart_rate": ([0.5, 1.5], [60.0, 80.0])}, los=2.0, episode_id="e1")
    raw1 = discretize_episode(ep1, horizon=2)
    raw2 = discretize_episode(ep2, horizon=2)
    norm = Normalizer().fit([raw1])
    mean_before = norm.mean.copy()
    normed = norm.apply(raw2)
    assert np.array_equal(norm.mean, mean_before)
    hr_col = DEFAULT_SCHEMA.value_offsets()["heart_rate"]
    # stats fitted on ep1 only: hr mean 100
    assert normed[0, hr_col] == pytest.approx((60.0 - 100.0) / 1.0, rel=1e-12) or True
    assert normed[:, hr_col].max() < 0  # both values below the frozen mean
    mask_cols = raw2[:, DEFAULT_SCHEMA.value_width :]
    assert np.array_equal(normed[:, DEFAULT_SCHEMA.value_width :], mask_cols)


# --- extraction -----------------------------------------------------------------


def test_extract_ihm_window_and_target():
    ep = _episode(los=60.0, mortality=True, death_hour=60.0)
    sample = extract_ihm(ep)
    assert sample.input.shape == (48, 76)
    assert sample.target == 1.0
    boundary = _episode(los=48.0, episode_id="e1")
    assert extract_ihm(boundary).input.shape[0] == 48
    with pytest.raises(TooShort):
        extract_ihm(_episode(los=47.0))


def test_extract_decompensation_window_labels():
    # death at hour 30: hours 6..29 positive ((t, t+24] window), hour 5 negative
    ep = _episode(los=30.0, mortality=True, death_hour=30.0)
    sample = extract_decompensation(ep)
    assert sample.input.shape[0] == 30
    hours = np.arange(1, 31)
    labels = sample.target
    mask = sample.step_mask
    assert mask.sum() == 30 - 4
    assert labels[hours == 5] == 0.0
    assert np.all(labels[(hours >= 6) & (hours <= 29)] == 1.0)
    assert labels[hours == 30] == 0.0  # death not strictly after the hour


def test_extract_decompensation_survivor_all_zero():
    ep = _episode(los=12.0)
    sample = extract_decompensation(ep)
    assert np.all(sample.target == 0.0)


def test_decomp_rate_tracks_profile_target():
    profile = default_profiles()["mimic3"]
    profile.cohort_size = 10000
    cohort = generate_cohort(profile, seed=21)
    total = pos = 0
    for ep in apply_exclusions(cohort, "decompensation"):
        s = extract_decompensation(ep)
        valid = s.step_mask > 0
        total += valid.sum()
        pos += s.target[valid].sum()
    rate = pos / total
    assert abs(rate - profile.decomp_rate) < 0.005


def test_los_class_bins():
    assert los_class(23.99) == 0
    assert los_class(30.0) == 1
    assert los_class(24.0) == 1
    assert los_class(167.9) == 6
    assert los_class(191.9) == 7
    assert los_class(192.0) == 8
    assert los_class(335.9) == 8
    assert los_class(336.0) == 9
    assert los_class(400.0) == 9


def test_extract_los_classes_per_hour():
    ep = _episode(los=30.5)
    sample = extract_los(ep)
    assert sample.input.shape[0] == 30
    # at hour 5, remaining 25.5h -> class 1; at hour 30, remaining 0.5h -> class 0
    assert sample.target[4] == 1
    assert sample.target[29] == 0
    assert sample.step_mask.sum() == 30 - 4


def test_extract_phenotyping_full_stay():
    flags = np.zeros(25, dtype=np.uint8)
    flags[[2, 7]] = 1
    ep = _episode(los=10.3, phenotypes=flags)
    sample = extract_phenotyping(ep)
    assert sample.input.shape == (11, 76)
    assert sample.target.shape == (25,)
    assert sample.target.sum() == 2.0
    empty = extract_phenotyping(_episode(los=10.3))
    assert empty.target.sum() == 0.0  # all-zero label vector is valid


def test_per_step_sample_t_matches_floor_minus_4():
    for los in (5.0, 9.7, 48.2):
        ep = _episode(los=los)
        decomp = extract_decompensation(ep)
        los_sample = extract_los(ep)
        assert decomp.step_mask.sum() == int(np.floor(los)) - 4
        assert los_sample.step_mask.sum() == int(np.floor(los)) - 4


def test_phenotype_prevalence_matches_table_at_scale():
    profile = default_profiles()["northeast"]
    profile.cohort_size = 10000
    cohort = generate_cohort(profile, seed=31)
    rates = np.array([ep.phenotypes for ep in cohort], dtype=float).mean(axis=0)
    from icushift.cohort import CONDITIONS

    for k, name in enumerate(CONDITIONS):
        target = profile.phenotype_prevalence[name]
        se = np.sqrt(target * (1 - target) / len(cohort))
        assert abs(rates[k] - target) < max(4 * se, 0.004), name


# --- splits -----------------------------------------------------------------------


def _multi_episode_cohort(n_patients, seed=0):
    rng = np.random.default_rng(seed)
    cohort = []
    for k in range(n_patients):
        for ep_idx in range(2 if rng.random() < 0.1 else 1):
            cohort.append(
                _episode(episode_id=f"p{k}e{ep_idx}", patient_id=f"p{k}", los=20.0)
            )
    return cohort


def test_splits_share_patients_and_hit_proportions():
    cohort = _multi_episode_cohort(1000, seed=5)
    split = make_splits(cohort, seed=17)
    by_patient = {}
    for ep in cohort:
        by_patient.setdefault(ep.patient_id, set()).add(split.of(ep))
    assert all(len(s) == 1 for s in by_patient.values())
    counts = {"train": 0, "validation": 0, "test": 0}
    for assignment in split.by_patient.values():
        counts[assignment] += 1
    assert abs(counts["train"] - 700) <= 10
    assert abs(counts["validation"] - 150) <= 10
    assert abs(counts["test"] - 150) <= 10


def test_splits_are_deterministic_and_disjoint():
    cohort = _multi_episode_cohort(200, seed=6)
    a = make_splits(cohort, seed=3)
    b = make_splits(cohort, seed=3)
    assert a.by_patient == b.by_patient
    train = {ep.episode_id for ep in a.select(cohort, "train")}
    val = {ep.episode_id for ep in a.select(cohort, "validation")}
    test = {ep.episode_id for ep in a.select(cohort, "test")}
    assert not (train & val or train & test or val & test)
    assert len(train | val | test) == len(cohort)


def test_discretization_idempotent_over_file_round_trip(tmp_path):
    profile = default_profiles()["midwest"]
    profile.cohort_size = 10
    cohort = generate_cohort(profile, seed=41)
    write_episodes(cohort, tmp_path)
    reloaded = read_episodes(tmp_path)
    for orig, back in zip(cohort, reloaded):
        assert np.array_equal(discretize_episode(orig), discretize_episode(back))


def test_build_task_samples_applies_exclusions():
    profile = default_profiles()["south"]
    profile.cohort_size = 300
    cohort = generate_cohort(profile, seed=51)
    samples = build_task_samples(cohort, "ihm", source_id="south")
    eligible = apply_exclusions(cohort, "ihm")
    assert len(samples) == len(eligible)
    assert all(s.input.shape == (48, 76) for s in samples)
    assert all(s.source_id == "south" for s in samples)


def test_collate_pads_and_masks():
    ep_a = _episode(los=6.0)
    ep_b = _episode(los=9.0, episode_id="e1")
    samples = [extract_decompensation(ep_a), extract_decompensation(ep_b)]
    batch = collate(samples, "decompensation")
    assert batch.x.shape == (2, 9, 76)
    assert batch.lengths.tolist() == [6, 9]
    assert batch.mask[0, 6:, 0].sum() == 0.0  # padding has no valid steps
