"""Build name stimulus groups from a baby-names popularity CSV.

The joint groups are the 8 sex x ethnicity cells, each holding the top-k
names by total count.  Marginal groups pool the joint ones along one
axis and keep duplicate names: a name popular in two cells counts twice
in the marginal, matching how the joint scores would average.
"""

import csv
import tempfile
from pathlib import Path

from clinbias import stimuli

rows = [("Year of Birth", "Gender", "Ethnicity", "Child's First Name", "Count")]
for sex in ("FEMALE", "MALE"):
    for eth in ("ASIAN AND PACIFIC ISLANDER", "BLACK NON HISPANIC",
                "HISPANIC", "WHITE NON HISPANIC"):
        for j in range(7):
            # same name appearing across years: counts are summed
            rows.append((2011, sex, eth, f"{eth[:2]}{sex[:1]}NAME{j}", 50 + j))
            rows.append((2012, sex, eth, f"{eth[:2]}{sex[:1]}NAME{j}", 60 + j))

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "names.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    groups = stimuli.ingest_baby_names(path, k=5)

print(f"{len(groups)} joint groups, hash {stimuli.stimuli_hash(groups)[:16]}")
for g in groups:
    print(f"  {g.group.label:<18} {', '.join(g.names)}")

print()
for axis in ("Sex", "Ethnicity"):
    for g in stimuli.marginal_groups(groups, axis):
        print(f"{axis} marginal {g.group.label:<10} pools {len(g.names)} name stimuli")

with tempfile.TemporaryDirectory() as d:
    frozen = Path(d) / "stimuli.json"
    stimuli.save_stimuli(groups, frozen)
    again = stimuli.load_stimuli(frozen)
print()
print("freeze/thaw preserves the hash:",
      stimuli.stimuli_hash(again) == stimuli.stimuli_hash(groups))
