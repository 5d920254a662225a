"""Shared fixtures and synthetic-data builders."""

import math
import re

import pytest

from clinbias import icd, intrinsic, provider, stimuli

# A small but representative code table: interior categories, ordinary
# 7-char style leaves, a 3-char billable leaf (R99), and an alphanumeric
# category placed via the range table's extras (C4A).
TOY_ROWS = [
    ("A00", False, "Cholera"),
    ("A000", True, "Cholera due to Vibrio cholerae 01, biovar cholerae"),
    ("A001", True, "Cholera due to Vibrio cholerae 01, biovar eltor"),
    ("A009", True, "Cholera, unspecified"),
    ("A01", False, "Typhoid and paratyphoid fevers"),
    ("A010", False, "Typhoid fever"),
    ("A0100", True, "Typhoid fever, unspecified"),
    ("A0101", True, "Typhoid meningitis"),
    ("B20", True, "Human immunodeficiency virus [HIV] disease"),
    ("C4A", False, "Merkel cell carcinoma"),
    ("C4A0", True, "Merkel cell carcinoma of lip"),
    ("C4A9", True, "Merkel cell carcinoma, unspecified"),
    ("E10", False, "Type 1 diabetes mellitus"),
    ("E109", True, "Type 1 diabetes mellitus without complications"),
    ("E11", False, "Type 2 diabetes mellitus"),
    ("E119", True, "Type 2 diabetes mellitus without complications"),
    ("N40", False, "Benign prostatic hyperplasia"),
    ("N400", True, "Benign prostatic hyperplasia without lower urinary tract symptoms"),
    ("N80", False, "Endometriosis"),
    ("N800", True, "Endometriosis of uterus"),
    ("R99", True, "Ill-defined and unknown cause of mortality"),
]


def write_order_file(path, rows):
    """Write rows of (code, billable, description) in the fixed-width
    order-file layout."""
    lines = []
    for i, (code, billable, desc) in enumerate(rows, 1):
        flag = "1" if billable else "0"
        lines.append(f"{i:05d} {code:<7} {flag} {desc[:60]:<60} {desc}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_tsv(path, rows):
    """Write rows of (code, description) as code<TAB>description."""
    path.write_text("".join(f"{code}\t{desc}\n" for code, desc in rows))
    return path


def synthetic_order_rows(rng, n_codes=300):
    """Random plausible order-file rows spread over the bundled blocks,
    including the extras categories.  Leaves are billable; every proper
    prefix down to 3 chars appears as a non-billable interior row."""
    table = icd.RangeTable.bundled()
    cats = sorted(
        {b.lo for b in table.blocks.values()}
        | {b.hi for b in table.blocks.values()}
        | set(table.extras)
    )
    leaves = set()
    while len(leaves) < n_codes:
        cat = rng.choice(cats)
        suffix = "".join(rng.choice("0123456789X") for _ in range(rng.randint(0, 4)))
        leaves.add(cat + suffix)
    # a code that is a proper prefix of another cannot be a billable leaf
    ordered = sorted(leaves)
    leaves = {
        c
        for c, nxt in zip(ordered, ordered[1:] + [""])
        if not (nxt.startswith(c) and len(nxt) > len(c))
    }
    interior = set()
    for c in leaves:
        for k in range(3, len(c)):
            if c[:k] not in leaves:
                interior.add(c[:k])
    rows = [(c, False, f"interior {c}") for c in interior]
    rows += [(c, True, f"synthetic condition {c}") for c in leaves]
    return sorted(rows)


def toy_joint_groups(k=5):
    """8 joint sex x ethnicity groups with synthetic distinct names."""
    groups = []
    for sex in stimuli.SEXES:
        for eth in stimuli.ETHNICITIES:
            names = tuple(f"{eth}{sex}{j}" for j in range(k))
            groups.append(stimuli.StimulusGroup(stimuli.DemographicGroup(sex=sex, ethnicity=eth), names))
    return groups


def fabricate_probe_results(hierarchy, groups, model_id, prob_fn, codes=None):
    """Probe-result dict assigning probability prob_fn(code, name) to each
    (diagnosis, name) pair."""
    results = {}
    for code in sorted(codes if codes is not None else hierarchy.l5_codes):
        prompt = intrinsic.probe_prompt(hierarchy.description_of(code))
        for group in groups:
            for name in group.names:
                q = provider.ContinuationQuery(model_id, prompt, intrinsic.name_continuation(name))
                if q in results:
                    continue
                p = prob_fn(code, name)
                lp = math.log(p) if p > 0 else -1.0e9  # exp(-1e9) underflows to exactly 0.0
                results[q] = provider.ProbeResult(q, lp, 1, 0.0, (lp,))
    return results


@pytest.fixture(scope="session")
def range_table():
    return icd.RangeTable.bundled()


@pytest.fixture(scope="session")
def toy_hierarchy(tmp_path_factory):
    path = tmp_path_factory.mktemp("icd") / "toy_order.txt"
    write_order_file(path, TOY_ROWS)
    return icd.parse_code_table(path)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    lines = {}
    for status, word in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" not in rep.nodeid:
                continue
            m = re.search(r"test_criterion_(\d+)", rep.nodeid)
            if m:
                lines[int(m.group(1))] = word
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(f"criterion {num}: {lines[num]}")
