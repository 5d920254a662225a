"""Drive the full CLI pipeline against mock inputs in a scratch dir.

ingest -> probe-intrinsic -> run-extrinsic -> report, all through the
same entry point the `clinbias` console script uses.  Everything is
deterministic: re-running any command on the warm cache reproduces the
report files byte for byte.
"""

import csv
import json
import tempfile
from pathlib import Path

from clinbias.cli import main

ORDER_ROWS = [
    ("A00", "0", "Cholera"),
    ("A000", "1", "Cholera due to Vibrio cholerae 01, biovar cholerae"),
    ("B20", "1", "Human immunodeficiency virus [HIV] disease"),
    ("E11", "0", "Type 2 diabetes mellitus"),
    ("E119", "1", "Type 2 diabetes mellitus without complications"),
    ("N40", "0", "Benign prostatic hyperplasia"),
    ("N400", "1", "Benign prostatic hyperplasia without lower urinary tract symptoms"),
    ("N80", "0", "Endometriosis"),
    ("N800", "1", "Endometriosis of uterus"),
]

with tempfile.TemporaryDirectory() as d:
    ws = Path(d)
    order = ws / "order.txt"
    order.write_text("".join(
        f"{i:05d} {code:<7} {flag} {desc[:60]:<60} {desc}\n"
        for i, (code, flag, desc) in enumerate(ORDER_ROWS, 1)
    ))

    with open(ws / "names.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Year of Birth", "Gender", "Ethnicity", "Child's First Name", "Count"])
        for sex in ("FEMALE", "MALE"):
            for eth in ("ASIAN AND PACIFIC ISLANDER", "BLACK NON HISPANIC",
                        "HISPANIC", "WHITE NON HISPANIC"):
                for j in range(5):
                    w.writerow([2011, sex, eth, f"{eth[:2]}{sex[:1]}N{j}", 90 - j])

    with open(ws / "records.jsonl", "w") as fh:
        for i, gold in enumerate([["E11.9"], ["A00.0", "B20"]]):
            fh.write(json.dumps({
                "record_id": f"r{i}", "sex": "Male", "ethnicity": "White",
                "insurance": "Other",
                "note": f"He is a {60 + i}-year-old man. Mr. Park reports his cough.",
                "gold_codes": gold,
            }) + "\n")

    (ws / "female.txt").write_text("N80.0\n")
    (ws / "male.txt").write_text("N40.0\n")

    (ws / "run.yaml").write_text("\n".join([
        "model_id: demo-model",
        "backend_kind: hash-mock",
        f"code_table: {order}",
        f"names_csv: {ws / 'names.csv'}",
        f"records_path: {ws / 'records.jsonl'}",
        f"female_codes: {ws / 'female.txt'}",
        f"male_codes: {ws / 'male.txt'}",
        f"cache_dir: {ws / 'cache'}",
        f"out_dir: {ws / 'out'}",
    ]) + "\n")

    for command in ("ingest", "probe-intrinsic", "run-extrinsic", "report"):
        print(f"\n$ clinbias {command} --config run.yaml")
        rc = main([command, "--config", str(ws / "run.yaml")])
        assert rc == 0, rc

    print("\n--- bias_report.md ---\n")
    print((ws / "out" / "bias_report.md").read_text())
