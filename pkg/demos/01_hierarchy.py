"""Walk the five-level ICD-10-CM hierarchy from a small code table.

Levels: L1 chapters, L2 blocks, L3 categories, L4 sub-categories, L5
full codes.  Chapters and blocks come bundled; categories and below come
from whatever code table you load (here: a small inline TSV).
"""

import tempfile
from pathlib import Path

from clinbias.icd import parse_code_table

ROWS = """\
A00\tCholera
A000\tCholera due to Vibrio cholerae 01, biovar cholerae
A001\tCholera due to Vibrio cholerae 01, biovar eltor
B20\tHuman immunodeficiency virus [HIV] disease
E10\tType 1 diabetes mellitus
E109\tType 1 diabetes mellitus without complications
E11\tType 2 diabetes mellitus
E119\tType 2 diabetes mellitus without complications
N40\tBenign prostatic hyperplasia
N400\tBenign prostatic hyperplasia without lower urinary tract symptoms
"""

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "codes.tsv"
    path.write_text(ROWS)
    h = parse_code_table(path)

print(f"{h.n_nodes} identifiers, {len(h.l5_codes)} full codes")
print(f"content hash {h.content_hash[:16]} (pin this in run provenance)\n")

for code in sorted(h.l5_codes):
    node = h.node(code)
    lineage = " > ".join(node.lineage[lv] for lv in ("L1", "L2", "L3", "L4", "L5"))
    print(f"{code:<6} {lineage}")

print()
# B20 is a 3-character billable code: it is its own category and sub-category
print("B20 lineage:", h.node("B20").lineage)

print()
print("L2 identifiers:", ", ".join(h.codes_at_level("L2")))
print("descendants of E08-E13:", sorted(h.l5_descendants("E08-E13", "L2")))
print("dotted input is normalized:", h.ancestor_at("E11.9", "L3"))
