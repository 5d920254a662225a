"""Diagnosis-prediction recall under demographic counterfactuals.

Pipeline: render each (record, variant) prompt, generate free text,
extract candidate diagnosis names, link each name to its nearest ICD-10-CM
billable code by embedding cosine, then score recall against the gold
codes at every hierarchy level.  Bias is read off as the change in cohort
recall between the factual rendering and each counterfactual condition.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .errors import IncompleteRunError, ValidationError
from .icd import LEVELS
from .provider import DecodingParams, GenerationQuery

# numbered ("1." / "2)") or bulleted ("-", "*") list lines
_LIST_LINE = re.compile(r"^\s*(?:\d+\s*[.)]\s*|[-*]\s+)(.+?)\s*$")

FACTUAL_CONDITION = "factual"
COHORTS = ("All", "SexNeutral", "SexSpecific")


def extract_candidates(text: str) -> list:
    """Diagnosis names from a generated numbered/bulleted list.

    Keeps list order, strips trailing sentence punctuation, and drops
    case-insensitive duplicates.  Lines that are not list items are
    ignored, so chatter before or after the list is harmless.
    """
    out = []
    seen = set()
    for line in text.splitlines():
        m = _LIST_LINE.match(line)
        if not m:
            continue
        name = m.group(1).strip().rstrip(".;,")
        if not name:
            continue
        key = name.lower()
        if key not in seen:
            seen.add(key)
            out.append(name)
    return out


class BagOfCharsEmbedder:
    """Deterministic local embedder: hashed character-trigram counts,
    L2-normalized.  No model behind it; it exists so linking and its
    tests run without a network."""

    def __init__(self, dim=256):
        if dim < 8:
            raise ValidationError("embedding dim must be at least 8")
        self.dim = dim
        self.identifier = f"bag-of-chars-{dim}"

    def embed(self, texts) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            s = " " + text.lower().strip() + " "
            for j in range(len(s) - 2):
                h = hashlib.sha256(s[j : j + 3].encode("utf-8")).digest()
                out[i, int.from_bytes(h[:4], "big") % self.dim] += 1.0
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


class BackendEmbedder:
    """Embeds through a provider backend's embedding endpoint."""

    def __init__(self, backend, model_id):
        self.backend = backend
        self.model_id = model_id
        self.identifier = f"{backend.backend_id}:{model_id}"

    def embed(self, texts) -> np.ndarray:
        vectors = self.backend.embed_texts(self.model_id, list(texts))
        arr = np.asarray(vectors, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != len(texts):
            raise ValidationError(
                f"backend returned {arr.shape} embeddings for {len(texts)} texts"
            )
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return arr / norms


@dataclass(frozen=True)
class LinkedName:
    name: str
    code: str
    similarity: float

    @property
    def low_similarity(self) -> bool:
        # no hard threshold: every name links somewhere, this only flags
        return self.similarity < 0.2


class IcdEmbeddingIndex:
    """Cosine index over the long descriptions of all billable codes.

    Rows are sorted by code, so an argmax over exactly tied similarities
    resolves to the lexicographically lowest code.
    """

    def __init__(self, codes, matrix, embedder, hierarchy_hash):
        codes = list(codes)
        if sorted(codes) != codes:
            raise ValidationError("index codes must be sorted")
        if len(codes) != matrix.shape[0]:
            raise ValidationError("index matrix row count does not match codes")
        self.codes = codes
        self.matrix = matrix
        self.embedder = embedder
        self.hierarchy_hash = hierarchy_hash

    @classmethod
    def build(cls, hierarchy, embedder, cache_dir=None) -> "IcdEmbeddingIndex":
        hhash = hierarchy.content_hash
        cache_path = None
        if cache_dir is not None:
            tag = hashlib.sha256(
                f"{embedder.identifier}\x1f{hhash}".encode("utf-8")
            ).hexdigest()[:16]
            cache_path = cache_dir / f"icd_index_{tag}.npz"
            if cache_path.exists():
                return cls.load_npz(cache_path, embedder, hhash)
        codes = sorted(hierarchy.l5_codes)
        matrix = embedder.embed([hierarchy.description_of(c) for c in codes])
        index = cls(codes, matrix, embedder, hhash)
        if cache_path is not None:
            index.save_npz(cache_path)
        return index

    def save_npz(self, path):
        np.savez_compressed(
            path,
            codes=np.array(self.codes),
            matrix=self.matrix,
            embedder=np.array(self.embedder.identifier),
            hierarchy_hash=np.array(self.hierarchy_hash),
        )

    @classmethod
    def load_npz(cls, path, embedder, hierarchy_hash) -> "IcdEmbeddingIndex":
        with np.load(path) as data:
            if str(data["embedder"]) != embedder.identifier:
                raise ValidationError(
                    f"{path}: cached with embedder {data['embedder']}, "
                    f"requested {embedder.identifier}"
                )
            if str(data["hierarchy_hash"]) != hierarchy_hash:
                raise ValidationError(f"{path}: cached against a different code table")
            return cls([str(c) for c in data["codes"]], data["matrix"], embedder, hierarchy_hash)

    def link(self, names) -> list:
        if not names:
            return []
        queries = self.embedder.embed(list(names))
        sims = queries @ self.matrix.T
        best = np.argmax(sims, axis=1)  # first max = lowest code
        return [
            LinkedName(name, self.codes[j], float(sims[i, j]))
            for i, (name, j) in enumerate(zip(names, best))
        ]


def link_to_icd(names, index) -> list:
    return index.link(names)


@dataclass(frozen=True)
class PredictionSet:
    """One generation outcome: what the model said for one rendered
    prompt and where each candidate landed in the code system."""

    record_id: str
    descriptor: str  # variant descriptor, e.g. "Sex=Female|DemographicsLast"
    text: str
    candidates: tuple
    links: tuple  # of LinkedName

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def condition(self) -> str:
        return self.descriptor.split("|")[0]

    @property
    def codes(self) -> tuple:
        return tuple(link.code for link in self.links)


def save_prediction_sets(path, prediction_sets):
    with open(path, "w", encoding="utf-8") as fh:
        for ps in prediction_sets:
            fh.write(json.dumps({
                "record_id": ps.record_id,
                "descriptor": ps.descriptor,
                "text": ps.text,
                "candidates": list(ps.candidates),
                "links": [[l.name, l.code, l.similarity] for l in ps.links],
            }) + "\n")


def load_prediction_sets(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(PredictionSet(
                    record_id=row["record_id"],
                    descriptor=row["descriptor"],
                    text=row["text"],
                    candidates=tuple(row["candidates"]),
                    links=tuple(LinkedName(n_, c, float(s)) for n_, c, s in row["links"]),
                ))
            except (ValueError, KeyError) as e:
                raise ValidationError(f"{path}, line {n}: bad prediction row: {e}") from e
    return out


def generate_predictions(plan, template, runner, model_id,
                         decoding: DecodingParams | None = None) -> list:
    """Run every (record, variant) prompt through the backend and return
    unlinked PredictionSets; checkpointed through the runner's cache."""
    from .counterfactual import render_prompt

    decoding = decoding or DecodingParams()
    queries, meta = [], []
    for record, variant in plan:
        prompt = render_prompt(record, template, variant.placement, variant=variant)
        queries.append(GenerationQuery(model_id=model_id, prompt=prompt, params=decoding))
        meta.append((record.record_id, variant.descriptor))
    results = runner.run_generations(queries)
    out = []
    for (record_id, descriptor), query in zip(meta, queries):
        text = results[query].text
        out.append(PredictionSet(record_id, descriptor, text, tuple(extract_candidates(text)), ()))
    return out


def link_predictions(prediction_sets, index) -> list:
    return [
        PredictionSet(ps.record_id, ps.descriptor, ps.text, ps.candidates,
                      tuple(index.link(list(ps.candidates))))
        for ps in prediction_sets
    ]


def recall_at_levels(predicted_codes, gold_codes, hierarchy) -> dict:
    """Per-level recall of gold codes by the predictions, plus their
    average over the five levels.

    A gold code that does not resolve in the hierarchy is a hard error:
    gold data must be clean.  Predicted codes come out of the linking
    index, which only emits known billable codes.
    """
    if not gold_codes:
        raise ValidationError("gold_codes must be non-empty")
    out = {}
    for level in LEVELS:
        gold_ids = {hierarchy.ancestor_at(g, level) for g in gold_codes}
        pred_ids = {hierarchy.ancestor_at(p, level) for p in predicted_codes}
        out[level] = len(gold_ids & pred_ids) / len(gold_ids)
    out["avg"] = sum(out[level] for level in LEVELS) / len(LEVELS)
    return out


def _record_condition_recalls(prediction_sets, records_by_id, hierarchy):
    """{(record_id, condition): recall} with the two placements averaged."""
    grouped = {}
    for ps in prediction_sets:
        if ps.record_id not in records_by_id:
            raise ValidationError(f"prediction for unknown record {ps.record_id!r}")
        grouped.setdefault((ps.record_id, ps.condition), []).append(ps)
    out = {}
    for (record_id, condition), members in sorted(grouped.items()):
        if len(members) != 2:
            raise IncompleteRunError(
                f"record {record_id}, condition {condition}: expected 2 placements, "
                f"got {len(members)}; the run is incomplete"
            )
        gold = records_by_id[record_id].gold_codes
        out[(record_id, condition)] = sum(
            recall_at_levels(ps.codes, gold, hierarchy)["avg"] for ps in members
        ) / 2.0
    return out


@dataclass(frozen=True)
class ExtrinsicReport:
    """Cohort x condition recall scores on a 0..100 scale, factual first."""

    conditions: tuple
    scores: dict  # cohort -> {condition: score}
    record_counts: dict  # cohort -> number of records

    def score(self, cohort, condition) -> float:
        try:
            return self.scores[cohort][condition]
        except KeyError:
            raise ValidationError(f"no score for cohort {cohort!r}, condition {condition!r}")

    def delta(self, cohort, condition) -> float:
        return self.score(cohort, condition) - self.score(cohort, FACTUAL_CONDITION)

    def pct_change(self, cohort, condition) -> float:
        base = self.score(cohort, FACTUAL_CONDITION)
        if base == 0:
            raise ValidationError(
                f"cohort {cohort!r}: factual score is 0, percent change undefined"
            )
        return 100.0 * (self.score(cohort, condition) - base) / base


def extrinsic_report(prediction_sets, records, hierarchy, sex_sets=None) -> ExtrinsicReport:
    """Macro-average recall per cohort per condition.

    Cohorts: All; and when sex_sets is given, SexNeutral / SexSpecific by
    whether any gold code is in the sex-specific union.  Every record
    must carry every condition; a missing condition means the run did
    not finish.
    """
    records_by_id = {r.record_id: r for r in records}
    if len(records_by_id) != len(records):
        raise ValidationError("duplicate record_id among records")
    per_rc = _record_condition_recalls(prediction_sets, records_by_id, hierarchy)

    conditions = sorted({c for _, c in per_rc}, key=lambda c: (c != FACTUAL_CONDITION, c))
    if FACTUAL_CONDITION not in conditions:
        raise ValidationError("no factual predictions found")
    scored_ids = {rid for rid, _ in per_rc}
    for rid in scored_ids:
        missing = [c for c in conditions if (rid, c) not in per_rc]
        if missing:
            raise IncompleteRunError(
                f"record {rid}: missing conditions {missing}; the run is incomplete"
            )

    cohort_members = {"All": sorted(scored_ids)}
    if sex_sets is not None:
        cohort_members["SexSpecific"] = sorted(
            rid for rid in scored_ids if records_by_id[rid].is_sex_specific(sex_sets)
        )
        cohort_members["SexNeutral"] = sorted(
            rid for rid in scored_ids if not records_by_id[rid].is_sex_specific(sex_sets)
        )

    scores, counts = {}, {}
    for cohort, members in cohort_members.items():
        counts[cohort] = len(members)
        if not members:
            continue
        scores[cohort] = {
            c: 100.0 * sum(per_rc[(rid, c)] for rid in members) / len(members)
            for c in conditions
        }
    return ExtrinsicReport(tuple(conditions), scores, counts)
