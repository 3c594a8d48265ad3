"""Synthetic region-shifted ICU-style cohorts.

Seventeen measurement channels (12 continuous, 5 categorical) are sampled
per episode: the recording count of a channel is Poisson(frequency x
length-of-stay) with uniform timestamps, and values are Gaussian around a
per-episode channel mean.  Labels come from a published latent severity
score

    z = (sum_c w_c * xi_c  +  w_gcs * u  +  noise_sd * eps) / norm

where xi_c is the standardized per-episode deviation of channel c, u is a
standardized coma-score severity, and norm makes z exactly standard
normal.  Every binary label thresholds z (or a correlated per-condition
score) at the Gaussian quantile of its target prevalence, so generated
prevalences match the profile parameters in distribution.

Cross-region shift is controlled by a single coefficient per profile: it
scales both the per-channel mean offsets (in units of the channel's
between-episode scale) and the rotation applied to the latent weight
vector, `w_region = (w + shift * rot) * |w| / |w + shift * rot|`.  All
tables involved are module constants below.

Episodes of patients who die in the ICU show a terminal drift: channel
values move toward abnormal over the final 24 hours.  Deaths can also
occur after ICU discharge (mortality label 1, no in-ICU event); the
in-ICU fraction is calibrated per profile so the per-hour decompensation
label rate lands on the profile's target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import EmptyCohort, InvalidProfile

_INV = NormalDist().inv_cdf

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class Channel:
    name: str
    display: str
    kind: str
    normal_value: float
    categories: tuple = ()  # category values; one-hot width == len(categories)

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == CATEGORICAL else 1


# Order fixed; it defines the discretized column layout and all file headers.
CHANNELS = (
    Channel("capillary_refill", "Capillary refill rate", CATEGORICAL, 0.0, (0.0, 1.0)),
    Channel("dbp", "Diastolic blood pressure", CONTINUOUS, 59.0),
    Channel("fio2", "Fraction inspired oxygen", CONTINUOUS, 0.21),
    Channel("gcs_eyes", "GCS eye opening", CATEGORICAL, 4.0, tuple(float(v) for v in range(1, 9))),
    Channel("gcs_motor", "GCS motor response", CATEGORICAL, 6.0, tuple(float(v) for v in range(1, 13))),
    Channel("gcs_verbal", "GCS verbal response", CATEGORICAL, 5.0, tuple(float(v) for v in range(1, 13))),
    Channel("gcs_total", "GCS total", CATEGORICAL, 15.0, tuple(float(v) for v in range(3, 16))),
    Channel("glucose", "Glucose", CONTINUOUS, 128.0),
    Channel("heart_rate", "Heart rate", CONTINUOUS, 86.0),
    Channel("height", "Height", CONTINUOUS, 170.0),
    Channel("map", "Mean arterial pressure", CONTINUOUS, 77.0),
    Channel("o2_sat", "Oxygen saturation", CONTINUOUS, 98.0),
    Channel("resp_rate", "Respiratory rate", CONTINUOUS, 19.0),
    Channel("sbp", "Systolic blood pressure", CONTINUOUS, 118.0),
    Channel("temperature", "Temperature", CONTINUOUS, 37.0),
    Channel("weight", "Weight", CONTINUOUS, 81.0),
    Channel("ph", "pH", CONTINUOUS, 7.4),
)

# Channels recorded at admission only: every event is pinned to hour zero.
ADMISSION_ONLY = ("height", "weight")


@dataclass(frozen=True)
class ChannelSchema:
    channels: tuple = CHANNELS

    @property
    def names(self):
        return tuple(c.name for c in self.channels)

    @property
    def value_width(self) -> int:
        return sum(c.width for c in self.channels)

    @property
    def total_width(self) -> int:
        return self.value_width + len(self.channels)

    def by_name(self, name: str) -> Channel:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    def value_offsets(self) -> dict:
        """Start column of each channel's value block (masks follow all blocks)."""
        offsets, pos = {}, 0
        for c in self.channels:
            offsets[c.name] = pos
            pos += c.width
        return offsets

    def mask_offset(self, index: int) -> int:
        return self.value_width + index


DEFAULT_SCHEMA = ChannelSchema()
assert DEFAULT_SCHEMA.total_width == 76

CONDITIONS = (
    "acute_unspecified_renal_failure",
    "acute_cerebrovascular_disease",
    "acute_myocardial_infarction",
    "cardiac_dysrhythmias",
    "chronic_kidney_disease",
    "chronic_obstructive_pulmonary_disease",
    "complications_surgical_medical_care",
    "conduction_disorders",
    "congestive_heart_failure",
    "coronary_atherosclerosis",
    "diabetes_mellitus_with_complications",
    "diabetes_mellitus_without_complication",
    "lipid_disorders",
    "essential_hypertension",
    "fluid_disorders",
    "gastrointestinal_hemorrhage",
    "hypertension_with_complications",
    "other_liver_diseases",
    "lower_respiratory_disease",
    "upper_respiratory_disease",
    "pleurisy",
    "pneumonia",
    "respiratory_failure",
    "septicemia",
    "shock",
)

REGIONS = ("mimic3", "south", "midwest", "west", "northeast")

# Hourly recording frequency of each channel, per region.
REGION_FREQUENCIES = {
    "capillary_refill": (0.0025, 0.0237, 0.0, 0.0110, 0.1200),
    "dbp": (1.0641, 0.9663, 1.1045, 1.4268, 1.0844),
    "fio2": (0.0597, 0.0227, 0.0207, 0.0219, 0.0144),
    "gcs_eyes": (0.1143, 0.2287, 0.1091, 0.1051, 0.5027),
    "gcs_motor": (0.1238, 0.2286, 0.1088, 0.1050, 0.5026),
    "gcs_verbal": (0.1242, 0.2359, 0.1750, 0.1562, 0.5027),
    "gcs_total": (0.1615, 0.2253, 0.1085, 0.1050, 0.5027),
    "glucose": (0.2462, 0.1819, 0.2061, 0.1824, 0.2540),
    "heart_rate": (1.1532, 1.1086, 1.2787, 1.5929, 1.0707),
    "height": (0.0049, 0.0266, 0.0267, 0.0319, 0.0263),
    "map": (1.0563, 0.9931, 1.0795, 1.3693, 1.0376),
    "o2_sat": (1.1260, 0.9953, 1.1963, 0.8140, 0.7383),
    "resp_rate": (1.1519, 1.0612, 1.1638, 1.2426, 1.0300),
    "sbp": (1.0646, 0.0966, 1.1044, 1.4268, 1.0845),
    "temperature": (0.3198, 0.3092, 0.3366, 0.4444, 0.3391),
    "weight": (0.0427, 0.0269, 0.0255, 0.0323, 0.0263),
    "ph": (0.0977, 0.0219, 0.0233, 0.0180, 0.0228),
}

# Ground-truth label rates per region: 25 conditions, mortality,
# per-hour decompensation rate, and mean remaining length-of-stay (hours).
REGION_PHENOTYPE_PREVALENCE = {
    "acute_unspecified_renal_failure": (0.2139, 0.1130, 0.1055, 0.0996, 0.1935),
    "acute_cerebrovascular_disease": (0.0735, 0.0705, 0.0705, 0.0823, 0.0647),
    "acute_myocardial_infarction": (0.1035, 0.0626, 0.0497, 0.0516, 0.0637),
    "cardiac_dysrhythmias": (0.3212, 0.1300, 0.0988, 0.1138, 0.2483),
    "chronic_kidney_disease": (0.1338, 0.0952, 0.0901, 0.0777, 0.1081),
    "chronic_obstructive_pulmonary_disease": (0.1302, 0.0810, 0.0717, 0.0712, 0.1187),
    "complications_surgical_medical_care": (0.2075, 0.0086, 0.0075, 0.0094, 0.0141),
    "conduction_disorders": (0.0719, 0.0097, 0.0074, 0.0063, 0.0127),
    "congestive_heart_failure": (0.2678, 0.1070, 0.0739, 0.0869, 0.1219),
    "coronary_atherosclerosis": (0.3231, 0.0436, 0.0210, 0.0140, 0.0376),
    "diabetes_mellitus_with_complications": (0.0952, 0.0457, 0.0337, 0.0370, 0.0429),
    "diabetes_mellitus_without_complication": (0.1927, 0.0070, 0.0031, 0.0020, 0.0108),
    "lipid_disorders": (0.2902, 0.0603, 0.0075, 0.0306, 0.0792),
    "essential_hypertension": (0.4194, 0.1854, 0.0770, 0.1587, 0.2011),
    "fluid_disorders": (0.2686, 0.1196, 0.0828, 0.0968, 0.3463),
    "gastrointestinal_hemorrhage": (0.0732, 0.0586, 0.0511, 0.0573, 0.0743),
    "hypertension_with_complications": (0.1324, 0.0181, 0.0091, 0.0121, 0.0164),
    "other_liver_diseases": (0.0889, 0.0271, 0.0254, 0.0329, 0.0720),
    "lower_respiratory_disease": (0.0517, 0.0273, 0.0224, 0.0212, 0.0445),
    "upper_respiratory_disease": (0.0406, 0.0047, 0.0047, 0.0050, 0.0077),
    "pleurisy": (0.0873, 0.0282, 0.0200, 0.0251, 0.1221),
    "pneumonia": (0.1388, 0.0915, 0.0948, 0.0912, 0.1709),
    "respiratory_failure": (0.1806, 0.2109, 0.1743, 0.2182, 0.2958),
    "septicemia": (0.1426, 0.0920, 0.1110, 0.1702, 0.1529),
    "shock": (0.0785, 0.0504, 0.0428, 0.0741, 0.1163),
}
REGION_IHM_PREVALENCE = (0.1323, 0.1149, 0.0854, 0.1438, 0.1359)
REGION_DECOMP_RATE = (0.0206, 0.0178, 0.0139, 0.0234, 0.0243)
REGION_RLOS_HOURS = (135.39, 106.247, 105.379, 167.528, 113.196)

CONTINUOUS_CHANNELS = tuple(c.name for c in CHANNELS if c.kind == CONTINUOUS)

BASE_MEANS = {
    "dbp": 62.0, "fio2": 0.34, "glucose": 135.0, "heart_rate": 86.0, "height": 170.0,
    "map": 78.0, "o2_sat": 97.0, "resp_rate": 19.0, "sbp": 120.0, "temperature": 37.0,
    "weight": 81.0, "ph": 7.40,
}
BASE_SCALES = {
    "dbp": 11.0, "fio2": 0.09, "glucose": 38.0, "heart_rate": 14.0, "height": 10.0,
    "map": 12.0, "o2_sat": 2.2, "resp_rate": 4.5, "sbp": 18.0, "temperature": 0.7,
    "weight": 18.0, "ph": 0.045,
}
WITHIN_NOISE = {
    "dbp": 5.0, "fio2": 0.04, "glucose": 18.0, "heart_rate": 6.0, "height": 0.5,
    "map": 6.0, "o2_sat": 1.2, "resp_rate": 2.5, "sbp": 8.0, "temperature": 0.3,
    "weight": 0.8, "ph": 0.02,
}
# FiO2 and pH get a deliberately different shape at the source hospital:
# wider spread, lower center than any of the regional profiles.
MIMIC_DIST_OVERRIDES = {"fio2": (0.46, 0.18), "ph": (7.36, 0.09)}

LATENT_WEIGHTS = {
    "heart_rate": 0.9, "sbp": -0.7, "dbp": -0.3, "map": -0.6, "o2_sat": -0.8,
    "resp_rate": 0.7, "temperature": 0.4, "glucose": 0.5, "fio2": 0.8, "ph": -0.6,
    "height": 0.0, "weight": 0.1,
}
GCS_LATENT_WEIGHT = 0.8
LABEL_NOISE_SD = 2.1

# Per-region mean offsets in units of the channel's between-episode scale.
REGION_MEAN_OFFSETS = {
    "mimic3": {},
    "south": {
        "heart_rate": 0.50, "sbp": -0.50, "dbp": -0.35, "map": -0.45, "o2_sat": -0.50,
        "resp_rate": 0.45, "temperature": 0.30, "glucose": 0.50, "fio2": -0.60,
        "ph": 0.50, "weight": 0.20,
    },
    "midwest": {
        "heart_rate": 0.35, "sbp": 0.30, "dbp": 0.25, "map": 0.30, "o2_sat": 0.30,
        "resp_rate": -0.30, "temperature": 0.15, "glucose": -0.35, "fio2": -0.50,
        "ph": 0.45, "weight": -0.15,
    },
    "west": {
        "heart_rate": -0.45, "sbp": -0.35, "dbp": -0.30, "map": -0.35, "o2_sat": 0.40,
        "resp_rate": 0.35, "temperature": -0.25, "glucose": 0.30, "fio2": -0.55,
        "ph": 0.40, "weight": 0.10,
    },
    "northeast": {
        "heart_rate": -0.30, "sbp": 0.40, "dbp": 0.30, "map": 0.35, "o2_sat": -0.35,
        "resp_rate": -0.40, "temperature": 0.20, "glucose": 0.25, "fio2": -0.65,
        "ph": 0.55, "weight": -0.10,
    },
}

# Rotation applied to the latent weight vector (see module docstring).
REGION_WEIGHT_ROTATIONS = {
    "mimic3": {},
    "south": {
        "heart_rate": -0.60, "sbp": -0.80, "dbp": 0.40, "map": 0.50, "o2_sat": -0.60,
        "resp_rate": -0.70, "temperature": 0.60, "glucose": 0.60, "fio2": 0.30,
        "ph": -0.50, "weight": 0.30,
    },
    "midwest": {
        "heart_rate": -0.50, "sbp": -0.70, "dbp": 0.35, "map": 0.45, "o2_sat": -0.55,
        "resp_rate": -0.60, "temperature": 0.55, "glucose": 0.50, "fio2": 0.25,
        "ph": -0.45, "weight": 0.25,
    },
    "west": {
        "heart_rate": -0.55, "sbp": -0.75, "dbp": 0.30, "map": 0.40, "o2_sat": -0.50,
        "resp_rate": -0.65, "temperature": 0.50, "glucose": 0.55, "fio2": 0.20,
        "ph": -0.40, "weight": 0.20,
    },
    "northeast": {
        "heart_rate": -0.45, "sbp": -0.60, "dbp": 0.30, "map": 0.35, "o2_sat": -0.45,
        "resp_rate": -0.55, "temperature": 0.45, "glucose": 0.45, "fio2": 0.20,
        "ph": -0.35, "weight": 0.20,
    },
}

# Correlation of each condition's latent with the severity score.
PHENOTYPE_COUPLING = tuple(
    (0.35, 0.45, 0.55, 0.65, 0.75)[i % 5] for i in range(len(CONDITIONS))
)

# Channel movement (scale units) over the final 24h of an in-ICU death.
TERMINAL_DRIFT = {
    "heart_rate": 1.2, "sbp": -1.5, "dbp": -1.0, "map": -1.3, "o2_sat": -1.5,
    "resp_rate": 1.3, "temperature": -0.5, "glucose": 0.6, "fio2": 1.0, "ph": -1.0,
    "height": 0.0, "weight": 0.0,
}
GCS_TERMINAL_SHIFT = 1.5  # added to severity u over the final 24h
STAY_LOG_SIGMA = 0.8
STAY_SEVERITY_COUPLING = 0.25  # correlation between log-stay and severity
CAPILLARY_ABNORMAL_RATE = {
    "mimic3": 0.12, "south": 0.15, "midwest": 0.10, "west": 0.12, "northeast": 0.18,
}
MULTI_EPISODE_RATE = 0.05
AGE_RANGE = (16, 92)
DEFAULT_COHORT_SIZES = {
    "mimic3": 4000, "south": 4000, "midwest": 4000, "west": 2000, "northeast": 1000,
}


@dataclass
class RegionProfile:
    """Generator parameters for one domain."""

    name: str
    cohort_size: int
    frequencies: dict
    value_means: dict
    value_scales: dict
    mean_offsets: dict
    weight_rotation: dict
    phenotype_prevalence: dict
    ihm_prevalence: float
    decomp_rate: float
    rlos_hours: float
    shift: float = 1.0
    capillary_abnormal_rate: float = 0.12
    multi_episode_rate: float = MULTI_EPISODE_RATE
    unknown_region_fraction: float = 0.0

    def validate(self):
        for name, f in self.frequencies.items():
            if f < 0:
                raise InvalidProfile(f"{self.name}: negative frequency for {name}")
        for name, p in self.phenotype_prevalence.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidProfile(f"{self.name}: prevalence out of [0,1] for {name}")
        if not 0.0 <= self.ihm_prevalence <= 1.0:
            raise InvalidProfile(f"{self.name}: mortality prevalence out of [0,1]")
        if self.cohort_size < 1:
            raise InvalidProfile(f"{self.name}: cohort_size must be >= 1")
        for name, s in self.value_scales.items():
            if s <= 0:
                raise InvalidProfile(f"{self.name}: non-positive scale for {name}")
        if self.rlos_hours <= 0:
            raise InvalidProfile(f"{self.name}: rlos_hours must be positive")

    @property
    def stay_median_hours(self) -> float:
        # lognormal stays: hour-weighted remaining LOS = median * exp(1.5 sigma^2) / 2
        sigma2 = STAY_LOG_SIGMA**2 + 0.0
        return self.rlos_hours / (np.exp(1.5 * sigma2) / 2.0)

    def effective_weights(self) -> dict:
        base = np.array([LATENT_WEIGHTS[c] for c in CONTINUOUS_CHANNELS])
        rot = np.array([self.weight_rotation.get(c, 0.0) for c in CONTINUOUS_CHANNELS])
        mixed = base + self.shift * rot
        norm = np.linalg.norm(mixed)
        if norm == 0.0:
            raise InvalidProfile(f"{self.name}: degenerate latent weights")
        mixed *= np.linalg.norm(base) / norm
        return dict(zip(CONTINUOUS_CHANNELS, mixed))

    def effective_means(self) -> dict:
        out = {}
        for c in CONTINUOUS_CHANNELS:
            off = self.mean_offsets.get(c, 0.0)
            out[c] = self.value_means[c] + self.shift * off * self.value_scales[c]
        return out


def default_profiles(shift: float = 1.0) -> dict:
    """The five shipped profiles, parameterized by the region tables above."""
    profiles = {}
    for idx, region in enumerate(REGIONS):
        means = dict(BASE_MEANS)
        scales = dict(BASE_SCALES)
        if region == "mimic3":
            for ch, (m, s) in MIMIC_DIST_OVERRIDES.items():
                means[ch], scales[ch] = m, s
        profiles[region] = RegionProfile(
            name=region,
            cohort_size=DEFAULT_COHORT_SIZES[region],
            frequencies={ch: REGION_FREQUENCIES[ch][idx] for ch in REGION_FREQUENCIES},
            value_means=means,
            value_scales=scales,
            mean_offsets=dict(REGION_MEAN_OFFSETS[region]),
            weight_rotation=dict(REGION_WEIGHT_ROTATIONS[region]),
            phenotype_prevalence={
                c: REGION_PHENOTYPE_PREVALENCE[c][idx] for c in CONDITIONS
            },
            ihm_prevalence=REGION_IHM_PREVALENCE[idx],
            decomp_rate=REGION_DECOMP_RATE[idx],
            rlos_hours=REGION_RLOS_HOURS[idx],
            shift=shift,
            capillary_abnormal_rate=CAPILLARY_ABNORMAL_RATE[region],
        )
    return profiles


@dataclass
class EpisodeRecord:
    """One synthetic ICU stay with raw timestamped measurements and labels."""

    patient_id: str
    episode_id: str
    region: str
    age: int
    los_hours: float
    events: dict  # channel name -> (times ndarray, values ndarray)
    mortality: bool
    death_hour: float | None
    phenotypes: np.ndarray  # (25,) of 0/1
    label_consistent: bool = True

    @property
    def record_count(self) -> int:
        return sum(len(t) for t, _ in self.events.values())


def _in_icu_death_fraction(profile: RegionProfile) -> float:
    """Calibrate the share of deaths at end-of-stay so the per-hour
    decompensation label rate matches the profile target."""
    if profile.ihm_prevalence <= 0.0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([0xCA11B, 7]))
    n = 200_000
    z = rng.normal(size=n)
    mix = STAY_SEVERITY_COUPLING * z + np.sqrt(1 - STAY_SEVERITY_COUPLING**2) * rng.normal(size=n)
    stays = profile.stay_median_hours * np.exp(STAY_LOG_SIGMA * mix)
    labeled = np.floor(stays) - 4.0
    eligible = labeled >= 1.0
    if not np.any(eligible):
        return 0.0
    labeled = labeled[eligible]
    z = z[eligible]
    dying = z > _INV(1.0 - profile.ihm_prevalence)
    pos_hours = np.minimum(24.0, labeled[dying])
    mean_pos = pos_hours.mean() * dying.mean() if dying.any() else 0.0
    if mean_pos == 0.0:
        return 0.0
    q = profile.decomp_rate * labeled.mean() / mean_pos
    return float(min(1.0, max(0.0, q)))


def _profile_entropy(profile: RegionProfile, seed: int):
    digest = hashlib.sha256(profile.name.encode()).digest()
    return np.random.SeedSequence([int.from_bytes(digest[:8], "little"), seed])


def generate_cohort(profile: RegionProfile, seed: int, schema: ChannelSchema = DEFAULT_SCHEMA):
    """Draw `profile.cohort_size` episodes; same seed gives identical output."""
    profile.validate()
    root = _profile_entropy(profile, seed)
    cohort_rng = np.random.default_rng(root)
    n = profile.cohort_size

    # patient assignment: a small share of patients contribute two stays
    patient_of = []
    pidx = i = 0
    while i < n:
        pid = f"{profile.name}_p{pidx:06d}"
        if cohort_rng.random() < profile.multi_episode_rate and i + 1 < n:
            patient_of.extend([pid, pid])
            i += 2
        else:
            patient_of.append(pid)
            i += 1
        pidx += 1

    unknown = (
        cohort_rng.random(n) < profile.unknown_region_fraction
        if profile.unknown_region_fraction > 0
        else np.zeros(n, dtype=bool)
    )

    in_icu_q = _in_icu_death_fraction(profile)
    weights = profile.effective_weights()
    means = profile.effective_means()
    w_vec = np.array([weights[c] for c in CONTINUOUS_CHANNELS])
    z_norm = np.sqrt(np.sum(w_vec**2) + GCS_LATENT_WEIGHT**2 + LABEL_NOISE_SD**2)
    ihm_thresh = _INV(1.0 - profile.ihm_prevalence) if profile.ihm_prevalence > 0 else np.inf
    phen_thresh = np.array(
        [
            _INV(1.0 - profile.phenotype_prevalence[c]) if profile.phenotype_prevalence[c] > 0 else np.inf
            for c in CONDITIONS
        ]
    )
    rho = np.array(PHENOTYPE_COUPLING)

    cont_index = {name: k for k, name in enumerate(CONTINUOUS_CHANNELS)}
    episodes = []
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
        xi = rng.normal(size=len(CONTINUOUS_CHANNELS))
        u_gcs = rng.normal()
        eps = rng.normal()
        z = (w_vec @ xi + GCS_LATENT_WEIGHT * u_gcs + LABEL_NOISE_SD * eps) / z_norm

        stay_mix = STAY_SEVERITY_COUPLING * z + np.sqrt(1 - STAY_SEVERITY_COUPLING**2) * rng.normal()
        los = max(float(profile.stay_median_hours * np.exp(STAY_LOG_SIGMA * stay_mix)), 0.5)

        mortality = bool(z > ihm_thresh)
        death_hour = None
        died_in_icu = False
        if mortality:
            died_in_icu = bool(rng.random() < in_icu_q)
            death_hour = los if died_in_icu else los + 48.0

        phen_eps = rng.normal(size=len(CONDITIONS))
        phen_z = rho * z + np.sqrt(1 - rho**2) * phen_eps
        phenotypes = (phen_z > phen_thresh).astype(np.uint8)

        events = {}
        for ch in schema.channels:
            freq = profile.frequencies.get(ch.name, 0.0)
            count = int(rng.poisson(freq * los))
            if count == 0:
                continue
            if ch.name in ADMISSION_ONLY:
                times = np.zeros(count)
            else:
                times = np.sort(rng.uniform(0.0, los, size=count))
            prox = (
                np.clip(1.0 - (death_hour - times) / 24.0, 0.0, 1.0)
                if died_in_icu
                else np.zeros(count)
            )
            if ch.kind == CONTINUOUS:
                m = means[ch.name] + profile.value_scales[ch.name] * xi[cont_index[ch.name]]
                vals = m + WITHIN_NOISE[ch.name] * rng.normal(size=count)
                drift = TERMINAL_DRIFT.get(ch.name, 0.0)
                if died_in_icu and drift:
                    vals = vals + drift * profile.value_scales[ch.name] * prox
            elif ch.name == "capillary_refill":
                vals = (rng.random(count) < profile.capillary_abnormal_rate).astype(np.float64)
            else:
                u_eff = u_gcs + GCS_TERMINAL_SHIFT * prox
                jitter = rng.normal(size=count)
                center, slope, spread, lo, hi = _GCS_SHAPE[ch.name]
                vals = np.clip(np.rint(center - slope * u_eff + spread * jitter), lo, hi)
            events[ch.name] = (times, np.asarray(vals, dtype=np.float64))

        episodes.append(
            EpisodeRecord(
                patient_id=patient_of[i],
                episode_id=f"{profile.name}_e{i:06d}",
                region="unknown" if unknown[i] else profile.name,
                age=age,
                los_hours=los,
                events=events,
                mortality=mortality,
                death_hour=death_hour,
                phenotypes=phenotypes,
            )
        )
    return episodes


# (center, severity slope, reading spread, clip lo, clip hi) per coma channel
_GCS_SHAPE = {
    "gcs_total": (13.8, 2.2, 0.8, 3.0, 15.0),
    "gcs_eyes": (3.7, 0.8, 0.4, 1.0, 4.0),
    "gcs_motor": (5.6, 1.1, 0.5, 1.0, 6.0),
    "gcs_verbal": (4.5, 1.0, 0.5, 1.0, 5.0),
}


def measurement_frequency(cohort, schema: ChannelSchema = DEFAULT_SCHEMA) -> dict:
    """Per-channel mean of (recording count / stay hours) over the cohort."""
    if not cohort:
        raise EmptyCohort("measurement_frequency on an empty cohort")
    sums = {name: 0.0 for name in schema.names}
    for ep in cohort:
        if ep.los_hours <= 0:
            raise InvalidProfile(f"episode {ep.episode_id} has non-positive stay")
        for name in schema.names:
            ev = ep.events.get(name)
            if ev is not None:
                sums[name] += len(ev[0]) / ep.los_hours
    n = len(cohort)
    return {name: sums[name] / n for name in schema.names}


def distribution_summary(cohort, schema: ChannelSchema = DEFAULT_SCHEMA, bins: int = 30) -> dict:
    """Histogram + mean + interquartile range of per-episode channel means.

    Channels never recorded anywhere in the cohort are flagged absent, the
    plot-data analogue of a missing panel.
    """
    if not cohort:
        raise EmptyCohort("distribution_summary on an empty cohort")
    summary = {}
    for name in schema.names:
        per_episode = [
            float(np.mean(ep.events[name][1]))
            for ep in cohort
            if name in ep.events and len(ep.events[name][1]) > 0
        ]
        if not per_episode:
            summary[name] = {"absent": True}
            continue
        arr = np.asarray(per_episode)
        lo, hi = float(arr.min()), float(arr.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(arr, bins=bins, range=(lo, hi))
        q1, q3 = np.percentile(arr, [25.0, 75.0])
        summary[name] = {
            "absent": False,
            "n_episodes": int(arr.size),
            "mean": float(arr.mean()),
            "iqr": (float(q1), float(q3)),
            "bin_edges": edges.tolist(),
            "counts": counts.tolist(),
        }
    return summary
