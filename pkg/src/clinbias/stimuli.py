"""Demographic groups and their name stimuli.

The joint groups are the 8 sex x ethnicity cells, each carrying the top-k
names by popularity count from a baby-name CSV (NYC open-data schema).
Marginal groups (sex-only, ethnicity-only) pool the joint groups' names,
keeping cross-group duplicates as distinct stimulus occurrences, so a
marginal mean weights each joint cell equally.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

from .errors import IngestError, ValidationError

ANY = "Any"
SEXES = ("Female", "Male")
ETHNICITIES = ("White", "Black", "Hispanic", "Asian")
INSURANCES = ("Medicaid", "Medicare", "Other")

# Raw ethnicity labels as they appear in the public CSV, including the
# truncated spellings present in some years.
_ETHNICITY_MAP = {
    "WHITE NON HISPANIC": "White",
    "WHITE NON HISP": "White",
    "BLACK NON HISPANIC": "Black",
    "BLACK NON HISP": "Black",
    "HISPANIC": "Hispanic",
    "ASIAN AND PACIFIC ISLANDER": "Asian",
    "ASIAN AND PACI": "Asian",
    "WHITE": "White",
    "BLACK": "Black",
    "ASIAN": "Asian",
}
_SEX_MAP = {"FEMALE": "Female", "MALE": "Male", "F": "Female", "M": "Male"}


@dataclass(frozen=True)
class DemographicGroup:
    sex: str = ANY
    ethnicity: str = ANY
    insurance: str = ANY
    label: str = ""

    def __post_init__(self):
        if self.sex not in SEXES + (ANY,):
            raise ValidationError(f"unknown sex value: {self.sex!r}")
        if self.ethnicity not in ETHNICITIES + (ANY,):
            raise ValidationError(f"unknown ethnicity value: {self.ethnicity!r}")
        if self.insurance not in INSURANCES + (ANY,):
            raise ValidationError(f"unknown insurance value: {self.insurance!r}")
        if (self.sex, self.ethnicity, self.insurance) == (ANY, ANY, ANY):
            raise ValidationError("at least one demographic axis must be set")
        if not self.label:
            parts = [v for v in (self.ethnicity, self.sex, self.insurance) if v != ANY]
            object.__setattr__(self, "label", " ".join(parts))


@dataclass(frozen=True)
class StimulusGroup:
    """A demographic group with its ordered name stimuli.

    Joint groups built by ingest_baby_names carry exactly k distinct
    names; marginal groups may repeat a name that several joint cells
    share (each occurrence is a distinct stimulus).
    """

    group: DemographicGroup
    names: tuple

    def __post_init__(self):
        if not self.names:
            raise ValidationError(f"group {self.group.label!r} has no name stimuli")
        object.__setattr__(self, "names", tuple(self.names))


def _normalize_ethnicity(raw: str) -> str:
    key = " ".join(raw.upper().split())
    if key not in _ETHNICITY_MAP:
        raise IngestError(f"unknown ethnicity label: {raw!r}")
    return _ETHNICITY_MAP[key]


def _normalize_sex(raw: str) -> str:
    key = raw.strip().upper()
    if key not in _SEX_MAP:
        raise IngestError(f"unknown sex label: {raw!r}")
    return _SEX_MAP[key]


def _pick_column(fieldnames, *candidates):
    lowered = {name.strip().lower(): name for name in fieldnames}
    for cand in candidates:
        if cand in lowered:
            return lowered[cand]
    return None


def ingest_baby_names(source, k: int = 5) -> list[StimulusGroup]:
    """Build the 8 joint sex x ethnicity groups from a popularity CSV.

    Counts are summed across years per (sex, ethnicity, name), with names
    case-normalized to title case before aggregation.  Exact duplicate
    rows are collapsed first (the public CSV contains re-uploaded
    duplicates).  Ties in total count break lexicographically by name.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    with open(source, encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{source}: empty CSV")
        sex_col = _pick_column(reader.fieldnames, "gender", "sex")
        eth_col = _pick_column(reader.fieldnames, "ethnicity")
        name_col = _pick_column(reader.fieldnames, "child's first name", "first name", "name")
        count_col = _pick_column(reader.fieldnames, "count")
        missing = [
            label
            for label, col in (
                ("gender", sex_col), ("ethnicity", eth_col),
                ("name", name_col), ("count", count_col),
            )
            if col is None
        ]
        if missing:
            raise IngestError(f"{source}: missing column(s): {', '.join(missing)}")

        totals: dict[tuple, int] = {}
        seen_rows = set()
        for line_no, row in enumerate(reader, 2):
            fingerprint = tuple(sorted((kk, vv) for kk, vv in row.items() if kk))
            if fingerprint in seen_rows:
                continue
            seen_rows.add(fingerprint)
            sex = _normalize_sex(row[sex_col] or "")
            ethnicity = _normalize_ethnicity(row[eth_col] or "")
            name = (row[name_col] or "").strip().title()
            if not name:
                raise IngestError(f"{source}, line {line_no}: empty name")
            try:
                count = int(row[count_col])
            except (TypeError, ValueError):
                raise IngestError(
                    f"{source}, line {line_no}: bad count {row[count_col]!r}"
                ) from None
            totals[(sex, ethnicity, name)] = totals.get((sex, ethnicity, name), 0) + count

    groups = []
    for sex in SEXES:
        for ethnicity in ETHNICITIES:
            ranked = sorted(
                ((name, n) for (s, e, name), n in totals.items() if (s, e) == (sex, ethnicity)),
                key=lambda item: (-item[1], item[0]),
            )
            if len(ranked) < k:
                raise IngestError(
                    f"group ({sex}, {ethnicity}) has only {len(ranked)} distinct names, "
                    f"need {k}"
                )
            names = tuple(name for name, _ in ranked[:k])
            groups.append(StimulusGroup(DemographicGroup(sex=sex, ethnicity=ethnicity), names))
    return groups


def marginal_groups(groups: list[StimulusGroup], axis: str) -> list[StimulusGroup]:
    """Pool joint groups along one axis; duplicates are kept as distinct
    stimulus occurrences."""
    if axis == "Sex":
        values, selector = SEXES, lambda g: g.group.sex
    elif axis == "Ethnicity":
        values, selector = ETHNICITIES, lambda g: g.group.ethnicity
    else:
        raise ValidationError(f"unknown marginal axis: {axis!r}")
    out = []
    for value in values:
        names = []
        for g in groups:
            if selector(g) == value:
                names.extend(g.names)
        if axis == "Sex":
            group = DemographicGroup(sex=value)
        else:
            group = DemographicGroup(ethnicity=value)
        out.append(StimulusGroup(group, tuple(names)))
    return out


def save_stimuli(groups: list[StimulusGroup], path) -> None:
    """Freeze groups to JSON so runs are reproducible without the CSV."""
    payload = [
        {
            "sex": g.group.sex,
            "ethnicity": g.group.ethnicity,
            "insurance": g.group.insurance,
            "label": g.group.label,
            "names": list(g.names),
        }
        for g in groups
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stimuli(path) -> list[StimulusGroup]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [
        StimulusGroup(
            DemographicGroup(
                sex=item["sex"],
                ethnicity=item["ethnicity"],
                insurance=item.get("insurance", ANY),
                label=item.get("label", ""),
            ),
            tuple(item["names"]),
        )
        for item in payload
    ]


def stimuli_hash(groups: list[StimulusGroup]) -> str:
    payload = [
        (g.group.sex, g.group.ethnicity, g.group.insurance, g.group.label, list(g.names))
        for g in groups
    ]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
