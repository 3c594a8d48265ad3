"""On-disk benchmark layout: one CSV per episode plus a listfile.

Episode files carry a `Hours` column followed by the 17 channel display
names; an empty cell means the channel was not recorded at that
timestamp.  Rows are sorted by (time, channel); simultaneous recordings
of different channels occupy separate rows, which keeps the write path a
bijection on the event multiset.  All numbers are written with `repr`,
whose shortest-round-trip form preserves float64 values exactly, so
`read(write(x)) == x`.

The listfile starts with the columns stay, region, period_length and the
y_true block (mortality, in-ICU death hour, 25 phenotype flags); episode
metadata needed for exclusions and patient-level splits follows.

Region profiles and channel schemas use a documented `key = value` text
format (INI sections) so pre-extracted real data can declare its own
layout.
"""

from __future__ import annotations

import configparser
import csv
import io
from pathlib import Path

import numpy as np

from .cohort import (
    CATEGORICAL,
    CONDITIONS,
    CONTINUOUS,
    Channel,
    ChannelSchema,
    DEFAULT_SCHEMA,
    EpisodeRecord,
    RegionProfile,
)
from .errors import IoFailure, MalformedFile

LISTFILE = "listfile.csv"


def _listfile_header():
    cols = ["stay", "region", "period_length", "y_true_mortality", "y_true_death_hour"]
    cols += [f"y_true_phen_{k + 1:02d}" for k in range(len(CONDITIONS))]
    cols += ["patient_id", "age", "label_consistent"]
    return cols


def write_episodes(cohort, directory, schema: ChannelSchema = DEFAULT_SCHEMA):
    """Write one CSV per episode plus the listfile; returns the listfile path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc

    name_to_col = {name: k for k, name in enumerate(schema.names)}
    rows_header = ["Hours"] + [c.display for c in schema.channels]
    list_rows = []
    for ep in cohort:
        flat = []
        for name, (times, values) in ep.events.items():
            col = name_to_col[name]
            for t, v in zip(times, values):
                flat.append((float(t), col, float(v)))
        flat.sort(key=lambda r: (r[0], r[1]))
        fname = f"{ep.episode_id}.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(rows_header)
        blank = [""] * len(schema.channels)
        for t, col, v in flat:
            row = [repr(t)] + blank.copy()
            row[col + 1] = repr(v)
            writer.writerow(row)
        (directory / fname).write_text(buf.getvalue())

        list_rows.append(
            [
                fname,
                ep.region,
                repr(float(ep.los_hours)),
                "1" if ep.mortality else "0",
                "" if ep.death_hour is None else repr(float(ep.death_hour)),
                *[str(int(v)) for v in ep.phenotypes],
                ep.patient_id,
                str(ep.age),
                "1" if ep.label_consistent else "0",
            ]
        )

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_listfile_header())
    writer.writerows(list_rows)
    path = directory / LISTFILE
    path.write_text(buf.getvalue())
    return path


def _parse_float(text, path, line_no, what):
    try:
        return float(text)
    except ValueError:
        raise MalformedFile(f"{path}:{line_no}: bad {what} value {text!r}") from None


def read_episodes(directory, schema: ChannelSchema = DEFAULT_SCHEMA, drop_unknown_region: bool = False):
    """Load a cohort written by `write_episodes` (or conforming real data).

    Events timestamped outside [0, stay) are dropped.  With
    `drop_unknown_region`, episodes tagged `unknown` are skipped.
    """
    directory = Path(directory)
    list_path = directory / LISTFILE
    if not list_path.is_file():
        raise IoFailure(f"no {LISTFILE} in {directory}")
    with open(list_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedFile(f"{list_path}:1: empty listfile") from None
        expected = _listfile_header()
        if header != expected:
            raise MalformedFile(f"{list_path}:1: unexpected listfile header {header!r}")
        rows = list(reader)

    n_phen = len(CONDITIONS)
    episodes = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(expected):
            raise MalformedFile(f"{list_path}:{line_no}: expected {len(expected)} columns")
        fname, region, period, mort, death = row[:5]
        phen = row[5 : 5 + n_phen]
        patient_id, age, consistent = row[5 + n_phen :]
        if drop_unknown_region and region == "unknown":
            continue
        los = _parse_float(period, list_path, line_no, "period_length")
        events = _read_episode_file(directory / fname, schema, los)
        episodes.append(
            EpisodeRecord(
                patient_id=patient_id,
                episode_id=fname[:-4] if fname.endswith(".csv") else fname,
                region=region,
                age=int(_parse_float(age, list_path, line_no, "age")),
                los_hours=los,
                events=events,
                mortality=mort == "1",
                death_hour=None if death == "" else _parse_float(death, list_path, line_no, "death_hour"),
                phenotypes=np.array([1 if p == "1" else 0 for p in phen], dtype=np.uint8),
                label_consistent=consistent == "1",
            )
        )
    return episodes


def _read_episode_file(path, schema, los):
    if not path.is_file():
        raise IoFailure(f"missing episode file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedFile(f"{path}:1: empty episode file") from None
        displays = [c.display for c in schema.channels]
        if header[:1] != ["Hours"]:
            raise MalformedFile(f"{path}:1: first column must be Hours")
        for col in header[1:]:
            if col not in displays:
                raise MalformedFile(f"{path}:1: unknown channel column {col!r}")
        if len(header) - 1 != len(displays):
            missing = sorted(set(displays) - set(header[1:]))
            raise MalformedFile(f"{path}:1: missing channel columns {missing}")
        col_to_name = {k + 1: schema.channels[displays.index(col)].name for k, col in enumerate(header[1:])}

        acc = {name: ([], []) for name in schema.names}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            t = _parse_float(row[0], path, line_no, "Hours")
            if not 0.0 <= t < los:
                continue
            for col_idx in range(1, len(row)):
                cell = row[col_idx]
                if cell == "":
                    continue
                v = _parse_float(cell, path, line_no, "measurement")
                times, vals = acc[col_to_name[col_idx]]
                times.append(t)
                vals.append(v)
    return {
        name: (np.asarray(t, dtype=np.float64), np.asarray(v, dtype=np.float64))
        for name, (t, v) in acc.items()
        if t
    }


# --- profile and schema text files -------------------------------------------


def save_profile(profile: RegionProfile, path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["profile"] = {
        "name": profile.name,
        "cohort_size": str(profile.cohort_size),
        "ihm_prevalence": repr(profile.ihm_prevalence),
        "decomp_rate": repr(profile.decomp_rate),
        "rlos_hours": repr(profile.rlos_hours),
        "shift": repr(profile.shift),
        "capillary_abnormal_rate": repr(profile.capillary_abnormal_rate),
        "multi_episode_rate": repr(profile.multi_episode_rate),
        "unknown_region_fraction": repr(profile.unknown_region_fraction),
    }
    for section, table in (
        ("frequencies", profile.frequencies),
        ("value_means", profile.value_means),
        ("value_scales", profile.value_scales),
        ("mean_offsets", profile.mean_offsets),
        ("weight_rotation", profile.weight_rotation),
        ("phenotype_prevalence", profile.phenotype_prevalence),
    ):
        cp[section] = {k: repr(float(v)) for k, v in table.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def load_profile(path) -> RegionProfile:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    read = cp.read(path)
    if not read:
        raise IoFailure(f"cannot read profile file {path}")
    try:
        head = cp["profile"]
        profile = RegionProfile(
            name=head["name"],
            cohort_size=int(head["cohort_size"]),
            frequencies={k: float(v) for k, v in cp["frequencies"].items()},
            value_means={k: float(v) for k, v in cp["value_means"].items()},
            value_scales={k: float(v) for k, v in cp["value_scales"].items()},
            mean_offsets={k: float(v) for k, v in cp["mean_offsets"].items()},
            weight_rotation={k: float(v) for k, v in cp["weight_rotation"].items()},
            phenotype_prevalence={k: float(v) for k, v in cp["phenotype_prevalence"].items()},
            ihm_prevalence=float(head["ihm_prevalence"]),
            decomp_rate=float(head["decomp_rate"]),
            rlos_hours=float(head["rlos_hours"]),
            shift=float(head.get("shift", "1.0")),
            capillary_abnormal_rate=float(head.get("capillary_abnormal_rate", "0.12")),
            multi_episode_rate=float(head.get("multi_episode_rate", "0.05")),
            unknown_region_fraction=float(head.get("unknown_region_fraction", "0.0")),
        )
    except (KeyError, ValueError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    profile.validate()
    return profile


def save_schema(schema: ChannelSchema, path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for ch in schema.channels:
        section = f"channel:{ch.name}"
        cp[section] = {"display": ch.display, "kind": ch.kind, "normal_value": repr(ch.normal_value)}
        if ch.kind == CATEGORICAL:
            cp[section]["categories"] = ",".join(repr(v) for v in ch.categories)
    with open(path, "w") as fh:
        cp.write(fh)


def load_schema(path) -> ChannelSchema:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise IoFailure(f"cannot read schema file {path}")
    channels = []
    for section in cp.sections():
        if not section.startswith("channel:"):
            raise MalformedFile(f"{path}: unexpected section {section!r}")
        body = cp[section]
        kind = body["kind"]
        if kind not in (CONTINUOUS, CATEGORICAL):
            raise MalformedFile(f"{path}: bad kind {kind!r} in {section}")
        categories = ()
        if kind == CATEGORICAL:
            categories = tuple(float(v) for v in body["categories"].split(","))
        channels.append(
            Channel(
                name=section.split(":", 1)[1],
                display=body["display"],
                kind=kind,
                normal_value=float(body["normal_value"]),
                categories=categories,
            )
        )
    return ChannelSchema(channels=tuple(channels))
