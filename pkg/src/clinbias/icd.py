"""Five-level ICD-10-CM hierarchy built from a code table.

Levels: L1 chapters and L2 blocks are range identifiers ("A00-B99",
"A00-A09"); L3 is the 3-character category, L4 the 4-character prefix, L5
the full code.  A billable code shorter than the usual seven characters is
its own L4 (and, at three characters, its own L3) ancestor, so every full
code resolves at all five levels.

Chapter and block ranges are not derivable from code strings alone, so
they ship as a versioned JSON table bundled with the package.  Categories
whose alphanumeric third character sorts outside their block's range
(C4A, M1A, ...) are placed through the table's "extras" field.

Codes are kept dotless internally ("E11.9" -> "E119"); use dotted() for
display.
"""

from __future__ import annotations

import hashlib
import json
import re
from bisect import bisect_right
from dataclasses import dataclass
from importlib import resources

from .errors import CodeLookupError, ParseError, StructuralError, ValidationError

LEVELS = ("L1", "L2", "L3", "L4", "L5")

_CODE_RE = re.compile(r"^[A-Z][0-9][0-9A-Z]{1,5}$")
_RANGE_RE = re.compile(r"^[A-Z][0-9A-Z]{2}-[A-Z][0-9A-Z]{2}$")


def normalize_code(code: str) -> str:
    """Canonical dotless uppercase form ("E11.9" -> "E119")."""
    c = code.strip().upper().replace(".", "")
    if not _CODE_RE.match(c):
        raise ValidationError(f"not an ICD-10-CM code: {code!r}")
    return c


def dotted(code: str) -> str:
    """Display form with the dot after the category ("E119" -> "E11.9")."""
    return code if len(code) <= 3 else code[:3] + "." + code[3:]


@dataclass(frozen=True)
class CodeRange:
    """An inclusive chapter or block range over 3-character categories."""

    id: str
    lo: str
    hi: str
    description: str
    chapter: str = ""  # empty for chapters themselves

    def contains(self, category: str) -> bool:
        return self.lo <= category <= self.hi


def _parse_range(range_id: str) -> tuple[str, str]:
    if not _RANGE_RE.match(range_id):
        raise StructuralError(f"malformed range identifier: {range_id!r}")
    lo, hi = range_id.split("-")
    if lo > hi:
        raise StructuralError(f"inverted range: {range_id!r}")
    return lo, hi


class RangeTable:
    """Chapter/block ranges plus out-of-range category placements.

    Validated on load: block ranges must be disjoint and fall inside their
    chapter; every extras entry must name an existing block.
    """

    def __init__(self, data: dict):
        self.version = str(data["version"])
        self.chapters: dict[str, CodeRange] = {}
        self.blocks: dict[str, CodeRange] = {}
        self.extras: dict[str, str] = {}  # category -> block id

        for ch in data["chapters"]:
            lo, hi = _parse_range(ch["id"])
            self.chapters[ch["id"]] = CodeRange(ch["id"], lo, hi, ch["description"])
        for bl in data["blocks"]:
            lo, hi = _parse_range(bl["id"])
            chapter = bl["chapter"]
            if chapter not in self.chapters:
                raise StructuralError(f"block {bl['id']} names unknown chapter {chapter}")
            crange = self.chapters[chapter]
            if not (crange.lo <= lo and hi <= crange.hi):
                raise StructuralError(f"block {bl['id']} outside chapter {chapter}")
            if bl["id"] in self.blocks:
                raise StructuralError(f"duplicate block {bl['id']}")
            self.blocks[bl["id"]] = CodeRange(bl["id"], lo, hi, bl["description"], chapter)
            for cat in bl.get("extras", ()):
                if self.extras.setdefault(cat, bl["id"]) != bl["id"]:
                    raise StructuralError(f"extra category {cat} claimed by two blocks")

        self._block_order = sorted(self.blocks.values(), key=lambda r: r.lo)
        self._block_lows = [r.lo for r in self._block_order]
        for prev, cur in zip(self._block_order, self._block_order[1:]):
            if cur.lo <= prev.hi:
                raise StructuralError(f"overlapping blocks {prev.id} and {cur.id}")

    @classmethod
    def bundled(cls) -> "RangeTable":
        text = (resources.files(__package__) / "data" / "chapters_blocks.json").read_text()
        return cls(json.loads(text))

    @classmethod
    def from_path(cls, path) -> "RangeTable":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def block_of(self, category: str) -> CodeRange | None:
        """The block containing a 3-character category, or None."""
        if category in self.extras:
            return self.blocks[self.extras[category]]
        i = bisect_right(self._block_lows, category) - 1
        if i >= 0 and self._block_order[i].contains(category):
            return self._block_order[i]
        return None

    def description_of(self, range_id: str) -> str:
        r = self.blocks.get(range_id) or self.chapters.get(range_id)
        if r is None:
            raise CodeLookupError(f"unknown range identifier: {range_id!r}")
        return r.description


@dataclass(frozen=True)
class DiagnosisNode:
    """One parsed code with its ancestor identifier at each level up to
    its own."""

    code: str
    description: str
    level: str
    lineage: dict  # level -> identifier, keys L1..own level


@dataclass(frozen=True)
class SexSpecificSets:
    female_only: frozenset
    male_only: frozenset

    @property
    def union(self) -> frozenset:
        return self.female_only | self.male_only


def _lineage_for(code: str, level: str, ranges: RangeTable) -> dict:
    l3 = code[:3]
    block = ranges.block_of(l3)
    if block is None:
        raise StructuralError(
            f"code {code}: category {l3} falls in no known block "
            f"(range table {ranges.version})"
        )
    lin = {"L1": block.chapter, "L2": block.id, "L3": l3}
    if level in ("L4", "L5"):
        lin["L4"] = code[:4]  # 3-char billable codes are their own L4 ancestor
    if level == "L5":
        lin["L5"] = code
    return lin


class Hierarchy:
    """Immutable after construction; safe for concurrent reads.

    Level identifier sets are the images of the L5 code set under
    ancestor mapping, so |L5| >= |L4| >= ... >= |L1| by construction.
    """

    def __init__(self, nodes: dict, l5_codes, ranges: RangeTable, source_name: str = ""):
        self._nodes = dict(nodes)
        self._l5 = frozenset(l5_codes)
        self.ranges = ranges
        self.source_name = source_name
        self._hash = None

        per_level: dict[str, dict] = {lvl: {} for lvl in LEVELS}
        for code in self._l5:
            lin = self._nodes[code].lineage
            for lvl in LEVELS:
                per_level[lvl].setdefault(lin[lvl], set()).add(code)
        self._descendants = {
            lvl: {ident: frozenset(codes) for ident, codes in members.items()}
            for lvl, members in per_level.items()
        }
        self._level_ids = {lvl: frozenset(m) for lvl, m in self._descendants.items()}

    @property
    def l5_codes(self) -> frozenset:
        return self._l5

    @property
    def n_nodes(self) -> int:
        return len(self._nodes)

    def node(self, code: str) -> DiagnosisNode:
        c = normalize_code(code)
        if c not in self._nodes:
            raise CodeLookupError(f"unknown code: {code!r}")
        return self._nodes[c]

    def is_l5(self, code: str) -> bool:
        try:
            return normalize_code(code) in self._l5
        except ValidationError:
            return False

    def codes_at_level(self, level: str) -> frozenset:
        _check_level(level)
        return self._level_ids[level]

    def ancestor_at(self, full_code: str, level: str) -> str:
        """Ancestor identifier of an L5 code at the given level."""
        _check_level(level)
        try:
            c = normalize_code(full_code)
        except ValidationError as e:
            raise CodeLookupError(str(e)) from e
        if c not in self._l5:
            raise CodeLookupError(f"not a known L5 code: {full_code!r}")
        return self._nodes[c].lineage[level]

    def l5_descendants(self, identifier: str, level: str) -> frozenset:
        """All L5 codes whose ancestor at `level` is `identifier`."""
        _check_level(level)
        try:
            return self._descendants[level][identifier]
        except KeyError:
            raise CodeLookupError(f"unknown {level} identifier: {identifier!r}") from None

    def description_of(self, identifier: str) -> str:
        if identifier in self._nodes:
            return self._nodes[identifier].description
        return self.ranges.description_of(identifier)

    @property
    def content_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            h.update(self.ranges.version.encode())
            for code in sorted(self._nodes):
                n = self._nodes[code]
                h.update(f"{n.code}\t{n.level}\t{n.description}\n".encode())
            self._hash = h.hexdigest()
        return self._hash


def _check_level(level: str) -> None:
    if level not in LEVELS:
        raise ValidationError(f"unknown level: {level!r} (expected one of {LEVELS})")


def _level_of(code: str, is_leaf: bool) -> str:
    if is_leaf:
        return "L5"
    return "L3" if len(code) == 3 else "L4"


def _parse_order_line(line: str, line_no: int) -> tuple[str, bool, str]:
    # CMS order-file layout, 0-indexed: order [0:5], code [6:13],
    # billable flag [14], short description [16:76], long [77:].
    if len(line) < 16 or not line[:5].isdigit() or line[5] != " ":
        raise ParseError(f"line {line_no}: not a fixed-width order-file line")
    flag = line[14]
    if flag not in "01":
        raise ParseError(f"line {line_no}: billable flag must be 0 or 1, got {flag!r}")
    try:
        code = normalize_code(line[6:13])
    except ValidationError as e:
        raise ParseError(f"line {line_no}: {e}") from e
    desc = line[77:].strip() or line[16:76].strip()
    if not desc:
        raise ParseError(f"line {line_no}: empty description")
    return code, flag == "1", desc


def _parse_tsv_line(line: str, line_no: int) -> tuple[str, str]:
    parts = line.split("\t")
    if len(parts) < 2:
        raise ParseError(f"line {line_no}: expected code<TAB>description")
    try:
        code = normalize_code(parts[0])
    except ValidationError as e:
        raise ParseError(f"line {line_no}: {e}") from e
    desc = parts[1].strip()
    if not desc:
        raise ParseError(f"line {line_no}: empty description")
    return code, desc


def parse_code_table(source, ranges: RangeTable | None = None) -> Hierarchy:
    """Parse a code table into a five-level Hierarchy.

    Accepts the fixed-width CMS order file (which carries a billable
    flag: billable rows become L5) or a TSV fallback of
    code<TAB>description.  The TSV has no billable flag, so leaves are
    taken as L5 there; the two readings agree on the official table,
    where exactly the billable codes are leaves.
    """
    if ranges is None:
        ranges = RangeTable.bundled()

    with open(source, encoding="utf-8") as fh:
        raw = [(n, line.rstrip("\n")) for n, line in enumerate(fh, 1)]
    raw = [(n, line) for n, line in raw if line.strip()]
    if not raw:
        return Hierarchy({}, frozenset(), ranges, str(source))

    is_tsv = "\t" in raw[0][1]
    rows: list[tuple[int, str, bool | None, str]] = []
    seen: dict[str, int] = {}
    for n, line in raw:
        if is_tsv:
            code, desc = _parse_tsv_line(line, n)
            billable = None
        else:
            code, billable, desc = _parse_order_line(line, n)
        if code in seen:
            raise ParseError(f"line {n}: duplicate code {code} (first at line {seen[code]})")
        seen[code] = n
        rows.append((n, code, billable, desc))

    if is_tsv:
        # leaf = no strictly longer code extends it; prefixes sort adjacent
        ordered = sorted(code for _, code, _, _ in rows)
        l5 = {
            c
            for c, nxt in zip(ordered, ordered[1:] + [""])
            if not (nxt.startswith(c) and len(nxt) > len(c))
        }
    else:
        l5 = {code for _, code, billable, _ in rows if billable}

    nodes = {}
    for _, code, _, desc in rows:
        level = _level_of(code, code in l5)
        nodes[code] = DiagnosisNode(code, desc, level, _lineage_for(code, level, ranges))
    return Hierarchy(nodes, l5, ranges, str(source))


def _read_code_list(path) -> frozenset:
    codes = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                codes.add(normalize_code(s))
            except ValidationError as e:
                raise ValidationError(f"{path}, line {n}: {e}") from e
    return frozenset(codes)


def load_sex_specific(female_source, male_source) -> SexSpecificSets:
    """Load the female-only / male-only code lists (one code per line,
    dotted or dotless; blank lines and # comments ignored)."""
    female = _read_code_list(female_source)
    male = _read_code_list(male_source)
    overlap = female & male
    if overlap:
        raise ValidationError(
            "codes on both sex-specific lists: " + ", ".join(sorted(overlap)[:10])
        )
    return SexSpecificSets(female_only=female, male_only=male)


# spec-facing functional aliases
def codes_at_level(hierarchy: Hierarchy, level: str) -> frozenset:
    return hierarchy.codes_at_level(level)


def ancestor_at(hierarchy: Hierarchy, full_code: str, level: str) -> str:
    return hierarchy.ancestor_at(full_code, level)
