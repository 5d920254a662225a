"""Report assembly and emission.

Reports are plain tables of pre-formatted strings plus a provenance
mapping, rendered to CSV, markdown, or JSON.  Output bytes are fully
deterministic: no timestamps, fixed float formatting, sorted provenance
keys.  Directional cells carry an explicit sign (+/-) so degradation is
readable in plain text.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .errors import ValidationError
from .extrinsic import FACTUAL_CONDITION
from .icd import LEVELS

REQUIRED_PROVENANCE = ("config_hash", "stimuli_hash", "hierarchy_hash", "backend_id")


def fmt(x, nd=4) -> str:
    if x is None:
        return "n/a"
    v = float(x)
    if v == 0:
        v = 0.0  # never print -0
    return f"{v:.{nd}f}"


def fmt_signed(x, nd=2) -> str:
    v = float(x)
    if v == 0:
        v = 0.0
    return f"{v:+.{nd}f}"


@dataclass(frozen=True)
class ReportTable:
    title: str
    columns: tuple
    rows: tuple

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValidationError(
                    f"table {self.title!r}: row width {len(r)} != {len(self.columns)} columns"
                )


@dataclass(frozen=True)
class BiasReport:
    tables: tuple
    provenance: dict  # str -> str; "n/a" marks inputs a run did not use

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        missing = [k for k in REQUIRED_PROVENANCE if k not in self.provenance]
        if missing:
            raise ValidationError(f"provenance is missing {missing}")
        for k, v in self.provenance.items():
            if not isinstance(v, str) or not v:
                raise ValidationError(f"provenance[{k!r}] must be a non-empty string")


def assoc_mad_table(report, title: str) -> ReportTable:
    """Per-level AssocMAD macro means with the grand average last."""
    rows = []
    for level in LEVELS:
        rows.append((
            level,
            fmt(report.macro_means.get(level)),
            str(report.scored_counts.get(level, 0)),
            str(report.excluded_zero_mean.get(level, 0)),
        ))
    rows.append(("Avg", fmt(report.average), "", ""))
    return ReportTable(title, ("Level", "AssocMAD", "Scored", "ExcludedZeroMean"), rows)


def sex_preference_table(pref, title="Correctness of sex preference") -> ReportTable:
    def ratio(r):
        return "n/a" if r is None else fmt(r, nd=4)

    rows = (
        ("female-only", ratio(pref.female_ratio), str(pref.female_ties), str(pref.female_total)),
        ("male-only", ratio(pref.male_ratio), str(pref.male_ties), str(pref.male_total)),
    )
    return ReportTable(title, ("List", "CorrectRatio", "Ties", "Total"), rows)


def extrinsic_tables(report, title_prefix="Extrinsic recall") -> list:
    """One table per cohort: recall per condition with signed delta and
    signed percent change against the factual row."""
    out = []
    for cohort in sorted(report.scores):
        base = report.score(cohort, FACTUAL_CONDITION)
        rows = []
        for condition in report.conditions:
            score = report.score(cohort, condition)
            delta = fmt_signed(report.delta(cohort, condition))
            pct = fmt_signed(report.pct_change(cohort, condition)) + "%" if base != 0 else "n/a"
            rows.append((condition, fmt(score, nd=2), delta, pct))
        out.append(ReportTable(
            f"{title_prefix} ({cohort}, n={report.record_counts[cohort]})",
            ("Condition", "Recall", "Delta", "PctChange"),
            rows,
        ))
    return out


def _counted_rows(counter, total):
    rows = []
    for key in sorted(counter):
        n = counter[key]
        share = f"{100.0 * n / total:.1f}%" if total else "n/a"
        rows.append((key, str(n), share))
    return rows


def stats_tables(records, hierarchy, sex_sets=None) -> list:
    """Dataset distribution summaries: record counts per demographic
    field (partitions of the record set) and per ICD chapter (a record
    counts once per chapter it touches), plus the sex-specific share
    when the lists are available."""
    n = len(records)
    out = []
    for field in ("sex", "ethnicity", "insurance"):
        counts = {}
        for r in records:
            v = getattr(r, field)
            counts[v] = counts.get(v, 0) + 1
        out.append(ReportTable(
            f"Records by {field}", ("Value", "Records", "Share"), _counted_rows(counts, n)
        ))

    chapter_counts = {}
    for r in records:
        chapters = {hierarchy.ancestor_at(c, "L1") for c in r.gold_codes}
        for ch in chapters:
            chapter_counts[ch] = chapter_counts.get(ch, 0) + 1
    out.append(ReportTable(
        "Records by ICD chapter", ("Chapter", "Records", "Share"),
        _counted_rows(chapter_counts, n),
    ))

    if sex_sets is not None:
        k = sum(1 for r in records if r.is_sex_specific(sex_sets))
        share = f"{100.0 * k / n:.1f}%" if n else "n/a"
        out.append(ReportTable(
            "Sex-specific records", ("Records", "Total", "Share"),
            ((str(k), str(n), share),),
        ))
    return out


def render_csv(report: BiasReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# provenance"])
    for k in sorted(report.provenance):
        w.writerow([k, report.provenance[k]])
    for table in report.tables:
        w.writerow([])
        w.writerow([f"# {table.title}"])
        w.writerow(list(table.columns))
        for row in table.rows:
            w.writerow(list(row))
    return buf.getvalue()


def _md_table(columns, rows):
    lines = ["| " + " | ".join(columns) + " |",
             "| " + " | ".join("---" for _ in columns) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def render_markdown(report: BiasReport) -> str:
    lines = ["# Bias report", "", "## Provenance", ""]
    lines += _md_table(
        ("Key", "Value"),
        [(k, report.provenance[k]) for k in sorted(report.provenance)],
    )
    for table in report.tables:
        lines += ["", f"## {table.title}", ""]
        lines += _md_table(table.columns, table.rows)
    return "\n".join(lines) + "\n"


def render_json(report: BiasReport) -> str:
    payload = {
        "provenance": {k: report.provenance[k] for k in sorted(report.provenance)},
        "tables": [
            {"title": t.title, "columns": list(t.columns), "rows": [list(r) for r in t.rows]}
            for t in report.tables
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


_RENDERERS = {".csv": render_csv, ".md": render_markdown, ".json": render_json}


def write_report(path, report: BiasReport) -> None:
    suffix = "." + str(path).rsplit(".", 1)[-1] if "." in str(path) else ""
    renderer = _RENDERERS.get(suffix)
    if renderer is None:
        raise ValidationError(
            f"cannot infer report format from {path!r}; use .csv, .md, or .json"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(renderer(report))
