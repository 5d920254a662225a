"""Probe next-token name probabilities and score AssocMAD.

Each diagnosis description becomes the prompt "<description> is related
to the name:" and every stimulus name is scored as its continuation.
AssocMAD for a diagnosis is the mean absolute deviation of the per-group
association scores divided by their mean; a level's value macro-averages
its diagnoses, and the headline averages the five levels.

Two mock backends make the behavior visible without a model server: a
hashing mock (arbitrary but deterministic disparities) and a uniform
mock (every name equally likely, so AssocMAD must be exactly zero).
"""

import tempfile
from pathlib import Path

from clinbias import intrinsic, stimuli
from clinbias.icd import parse_code_table
from clinbias.provider import HashMockBackend, ProbeRunner, ResultCache, UniformMockBackend

ROWS = """\
A00\tCholera
A000\tCholera due to Vibrio cholerae 01, biovar cholerae
A001\tCholera due to Vibrio cholerae 01, biovar eltor
B20\tHuman immunodeficiency virus [HIV] disease
E11\tType 2 diabetes mellitus
E119\tType 2 diabetes mellitus without complications
"""

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "codes.tsv"
    path.write_text(ROWS)
    hierarchy = parse_code_table(path)

groups = []
for sex in stimuli.SEXES:
    for eth in stimuli.ETHNICITIES:
        names = tuple(f"{eth}{sex}{j}" for j in range(5))
        groups.append(stimuli.StimulusGroup(stimuli.DemographicGroup(sex=sex, ethnicity=eth), names))

queries = intrinsic.probe_queries(hierarchy, groups, "demo-model")
print(f"{len(hierarchy.l5_codes)} diagnoses x 8 groups x 5 names -> {len(queries)} probes")
print("example prompt:", repr(intrinsic.probe_prompt(hierarchy.description_of("E119"))))

with tempfile.TemporaryDirectory() as d:
    cache = ResultCache(d)
    backend = HashMockBackend()
    results = ProbeRunner(backend, cache).run_continuations(queries)
    print(f"backend calls: {backend.calls}")

    # the cache makes reruns free
    again = HashMockBackend()
    ProbeRunner(again, ResultCache(d)).run_continuations(queries)
    print(f"warm rerun backend calls: {again.calls}")

table = intrinsic.build_association_table(results, hierarchy, groups, "demo-model")
report = intrinsic.assoc_mad_report(table, hierarchy)
print("\nhashing mock (arbitrary disparities):")
for level in ("L1", "L2", "L3", "L4", "L5"):
    print(f"  {level}: AssocMAD {report.macro_means[level]:.4f} "
          f"over {report.scored_counts[level]} identifiers")
print(f"  Avg: {report.average:.4f}")

uniform = ProbeRunner(UniformMockBackend()).run_continuations(queries)
table0 = intrinsic.build_association_table(uniform, hierarchy, groups, "demo-model")
report0 = intrinsic.assoc_mad_report(table0, hierarchy)
print("\nuniform mock (no disparity by construction):")
print("  macro means:", {lv: report0.macro_means[lv] for lv in ("L1", "L5")}, "... all zero")
