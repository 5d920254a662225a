"""Score diagnosis-prediction recall under counterfactuals, end to end.

A fixture backend answers every prompt with the record's gold diagnosis
descriptions except when the prompt says the patient is female, where it
drops half the list.  The report shows recall 100 on the factual rows
and a negative Sex=Female delta; all other conditions sit at zero delta.
"""

import tempfile
from pathlib import Path

from clinbias import counterfactual as cf
from clinbias import extrinsic as ex
from clinbias import reports
from clinbias.icd import parse_code_table
from clinbias.provider import ProbeRunner, TableMockBackend

ROWS = """\
A00\tCholera
A000\tCholera due to Vibrio cholerae 01, biovar cholerae
B20\tHuman immunodeficiency virus [HIV] disease
E11\tType 2 diabetes mellitus
E119\tType 2 diabetes mellitus without complications
J18\tPneumonia, unspecified organism
J189\tPneumonia, unspecified organism
"""

with tempfile.TemporaryDirectory() as d:
    p = Path(d) / "codes.tsv"
    p.write_text(ROWS)
    hierarchy = parse_code_table(p)

records = [
    cf.AdmissionRecord(f"r{i}", "Male", "White", "Other",
                       f"He is a {50 + i}-year-old man with cough and fever.",
                       frozenset(gold))
    for i, gold in enumerate([["E119", "J189"], ["A000", "B20"], ["J189"]])
]

template = cf.default_template()
plan = cf.variant_plan(records)
table = {}
for record, variant in plan:
    prompt = cf.render_prompt(record, template, variant.placement, variant=variant)
    gold = sorted(record.gold_codes)
    if "sex: Female" in prompt:
        gold = gold[: max(1, len(gold) // 2)]  # the injected bias
    table[prompt] = "\n".join(f"{i}. {hierarchy.description_of(c)}"
                              for i, c in enumerate(gold, 1))
backend = TableMockBackend(generation_table=table)

preds = ex.generate_predictions(plan, template, ProbeRunner(backend), "demo-model")
print("one generation:", repr(preds[0].text.splitlines()[0]), "...")
print("extracted candidates:", preds[0].candidates)

index = ex.IcdEmbeddingIndex.build(hierarchy, ex.BagOfCharsEmbedder(dim=128))
linked = ex.link_predictions(preds, index)
link = linked[0].links[0]
print(f"linked {link.name!r} -> {link.code} (cosine {link.similarity:.3f})")

r = ex.recall_at_levels(["E119"], ["E119", "A000"], hierarchy)
print("\nrecall of [E119, A000] by [E119]:", r)

report = ex.extrinsic_report(linked, records, hierarchy)
print()
for t in reports.extrinsic_tables(report):
    print(f"{t.title}")
    for row in t.rows:
        print("  " + "  ".join(f"{cell:<12}" for cell in row))
