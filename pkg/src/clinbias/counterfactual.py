"""Counterfactual variants of admission records.

One demographic axis changes at a time.  Sex changes rewrite the note
through a word-level gendered lexicon; ethnicity and insurance changes
leave the note byte-identical.  Each variant renders at two placements,
demographics block before or after the note, so downstream scores can
average out positional bias.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources

from .errors import TemplateError, ValidationError
from .icd import normalize_code
from .stimuli import ETHNICITIES, INSURANCES, SEXES

PLACEMENTS = ("DemographicsFirst", "DemographicsLast")
AXES = ("Sex", "Ethnicity", "Insurance")
DEFAULT_AXIS_VALUES = {
    "Sex": ("Female",),
    "Ethnicity": ("Black", "Hispanic", "Asian"),
    "Insurance": ("Medicaid", "Medicare"),
}
# the factual profile the counterfactual plan perturbs
BASELINE = {"sex": "Male", "ethnicity": "White", "insurance": "Other"}

_AXIS_VOCAB = {"Sex": SEXES, "Ethnicity": ETHNICITIES, "Insurance": INSURANCES}


class GenderedLexicon:
    """Word-level gender rewriting from a two-column TSV (male<TAB>female).

    Duplicate keys resolve first-row-wins in each direction; with the
    bundled rows that makes his->her and her->his the uniform policy and
    him->her one-way ("hers" is never produced or consumed).  The round
    trip therefore restores bytes only over bijective tokens; "him",
    "hers", "Mrs." and "Miss" are the known exceptions.

    Plain words match in three case shapes (lower, Capitalized, UPPER)
    and the replacement mirrors the matched shape.  Tokens containing a
    dot (honorifics) match exactly as written, so the clinical
    abbreviation "MS." is never rewritten.  Substitution is single-pass:
    outputs of one rule are never re-matched by another.
    """

    def __init__(self, pairs):
        pairs = [(m.strip(), f.strip()) for m, f in pairs]
        if not pairs or any(not m or not f for m, f in pairs):
            raise ValidationError("lexicon must be non-empty with two tokens per row")
        self.pairs = tuple(pairs)
        self._m2f = self._compile((m, f) for m, f in self.pairs)
        self._f2m = self._compile((f, m) for m, f in self.pairs)

    @staticmethod
    def _compile(directed):
        base = {}
        for src, dst in directed:
            base.setdefault(src, dst)  # first row wins
        surface = {}
        for src, dst in base.items():
            if "." in src:
                surface.setdefault(src, dst)
            else:
                surface.setdefault(src.lower(), dst.lower())
                surface.setdefault(src.capitalize(), dst.capitalize())
                surface.setdefault(src.upper(), dst.upper())
        parts = []
        for s in sorted(surface, key=lambda s: (-len(s), s)):
            part = r"\b" + re.escape(s)
            if s[-1].isalnum():
                part += r"\b"
            parts.append(part)
        return re.compile("|".join(parts)), surface

    @classmethod
    def from_tsv(cls, path) -> "GenderedLexicon":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) != 2:
                    raise ValidationError(f"{path}, line {n}: expected male<TAB>female")
                pairs.append((cols[0], cols[1]))
        return cls(pairs)

    @classmethod
    def bundled(cls) -> "GenderedLexicon":
        path = resources.files(__package__) / "data" / "gendered_lexicon.tsv"
        pairs = []
        for line in path.read_text().splitlines():
            if line.strip() and not line.startswith("#"):
                m, f = line.split("\t")
                pairs.append((m, f))
        return cls(pairs)

    def apply(self, text: str, direction: str) -> str:
        if direction not in ("m2f", "f2m"):
            raise ValidationError(f"direction must be 'm2f' or 'f2m', got {direction!r}")
        pattern, surface = self._m2f if direction == "m2f" else self._f2m
        return pattern.sub(lambda m: surface[m.group(0)], text)


@dataclass(frozen=True)
class AdmissionRecord:
    record_id: str
    sex: str
    ethnicity: str
    insurance: str
    note: str
    gold_codes: frozenset

    def __post_init__(self):
        if not self.record_id:
            raise ValidationError("record_id must be non-empty")
        if self.sex not in SEXES:
            raise ValidationError(f"record {self.record_id}: unknown sex {self.sex!r}")
        if self.ethnicity not in ETHNICITIES:
            raise ValidationError(f"record {self.record_id}: unknown ethnicity {self.ethnicity!r}")
        if self.insurance not in INSURANCES:
            raise ValidationError(f"record {self.record_id}: unknown insurance {self.insurance!r}")
        if not self.gold_codes:
            raise ValidationError(f"record {self.record_id}: gold_codes must be non-empty")
        object.__setattr__(self, "gold_codes", frozenset(self.gold_codes))

    def is_sex_specific(self, sex_sets) -> bool:
        return bool(self.gold_codes & sex_sets.union)


@dataclass(frozen=True)
class CounterfactualVariant:
    base_record_id: str
    changed_axis: str | None  # None marks the factual rendering
    new_value: str | None
    rewritten_note: str
    placement: str

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValidationError(f"unknown placement: {self.placement!r}")
        if (self.changed_axis is None) != (self.new_value is None):
            raise ValidationError("changed_axis and new_value must both be set or both None")
        if self.changed_axis is not None and self.changed_axis not in AXES:
            raise ValidationError(f"unknown axis: {self.changed_axis!r}")

    @property
    def is_factual(self) -> bool:
        return self.changed_axis is None

    @property
    def descriptor(self) -> str:
        head = "factual" if self.is_factual else f"{self.changed_axis}={self.new_value}"
        return f"{head}|{self.placement}"


def load_records(path) -> list:
    """Read admission records from JSON lines: record_id, sex, ethnicity,
    insurance, note, gold_codes[]."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except ValueError as e:
                raise ValidationError(f"{path}, line {n}: bad JSON: {e}") from e
            try:
                record = AdmissionRecord(
                    record_id=str(row["record_id"]),
                    sex=row["sex"],
                    ethnicity=row["ethnicity"],
                    insurance=row["insurance"],
                    note=row["note"],
                    gold_codes=frozenset(normalize_code(c) for c in row["gold_codes"]),
                )
            except KeyError as e:
                raise ValidationError(f"{path}, line {n}: missing field {e}") from e
            except ValidationError as e:
                raise ValidationError(f"{path}, line {n}: {e}") from e
            if record.record_id in seen:
                raise ValidationError(f"{path}, line {n}: duplicate record_id {record.record_id}")
            seen.add(record.record_id)
            records.append(record)
    return records


def factual_variant(record: AdmissionRecord, placement: str) -> CounterfactualVariant:
    return CounterfactualVariant(record.record_id, None, None, record.note, placement)


def make_counterfactual(record: AdmissionRecord, axis: str, value: str, lexicon=None,
                        placement: str = "DemographicsFirst") -> CounterfactualVariant:
    """Replace one demographic axis; sex changes rewrite the note through
    the lexicon, other axes leave it byte-identical."""
    if axis not in AXES:
        raise ValidationError(f"unknown axis: {axis!r}")
    if value not in _AXIS_VOCAB[axis]:
        raise ValidationError(f"unknown {axis} value: {value!r}")
    current = getattr(record, axis.lower())
    if value == current:
        raise ValidationError(
            f"record {record.record_id}: {axis} is already {value!r}; nothing to change"
        )
    if axis == "Sex":
        if lexicon is None:
            lexicon = GenderedLexicon.bundled()
        direction = "m2f" if value == "Female" else "f2m"
        note = lexicon.apply(record.note, direction)
    else:
        note = record.note
    return CounterfactualVariant(record.record_id, axis, value, note, placement)


def effective_demographics(record: AdmissionRecord, variant: CounterfactualVariant) -> dict:
    demo = {"sex": record.sex, "ethnicity": record.ethnicity, "insurance": record.insurance}
    if not variant.is_factual:
        demo[variant.changed_axis.lower()] = variant.new_value
    return demo


def demographics_block(sex: str, ethnicity: str, insurance: str) -> str:
    return f"Demographics: sex: {sex}; ethnicity: {ethnicity}; insurance: {insurance}."


def default_template() -> str:
    return (resources.files(__package__) / "data" / "prompt_template.txt").read_text()


def load_template(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def render_prompt(record: AdmissionRecord, template: str, placement: str,
                  variant: CounterfactualVariant | None = None) -> str:
    """Fill the template's {demographics} and {note} slots.  Placement
    DemographicsLast swaps the two slots' positions, leaving all other
    template text where it is."""
    if placement not in PLACEMENTS:
        raise ValidationError(f"unknown placement: {placement!r}")
    for slot in ("{demographics}", "{note}"):
        if slot not in template:
            raise TemplateError(f"template is missing the {slot} slot")
    note = variant.rewritten_note if variant is not None else record.note
    if not note.strip():
        raise TemplateError(f"record {record.record_id}: empty clinical note")
    demo = demographics_block(**effective_demographics(record, variant or factual_variant(record, placement)))
    t = template
    if placement == "DemographicsLast":
        t = (
            t.replace("{demographics}", "\x00")
            .replace("{note}", "{demographics}")
            .replace("\x00", "{note}")
        )
    # str.replace, not str.format: notes may contain literal braces
    return t.replace("{demographics}", demo).replace("{note}", note)


def variant_plan(records, axes_config=None, lexicon=None) -> list:
    """(record, variant) evaluation pairs: the factual rendering plus
    each configured counterfactual value, each at both placements.
    Records off the baseline profile are excluded with a warning."""
    if axes_config is None:
        axes_config = DEFAULT_AXIS_VALUES
    for axis in axes_config:
        if axis not in AXES:
            raise ValidationError(f"unknown axis in plan config: {axis!r}")
    if lexicon is None and "Sex" in axes_config:
        lexicon = GenderedLexicon.bundled()

    plan = []
    for record in records:
        profile = {"sex": record.sex, "ethnicity": record.ethnicity, "insurance": record.insurance}
        if profile != BASELINE:
            warnings.warn(
                f"record {record.record_id}: profile {profile} is not the baseline "
                f"{BASELINE}; excluded from the counterfactual plan"
            )
            continue
        for placement in PLACEMENTS:
            plan.append((record, factual_variant(record, placement)))
        for axis in AXES:
            for value in axes_config.get(axis, ()):
                for placement in PLACEMENTS:
                    plan.append((record, make_counterfactual(record, axis, value, lexicon, placement)))
    return plan
