import json
import random

import pytest

from clinbias import counterfactual as cf
from clinbias.errors import TemplateError, ValidationError

# male-form tokens whose round trip m2f then f2m restores bytes exactly
BIJECTIVE_MALE = [
    "he", "his", "himself", "man", "men", "male", "males", "gentleman",
    "gentlemen", "widower", "father", "husband", "son", "brother", "uncle",
    "grandfather", "sir",
]
NEUTRAL = [
    "patient", "presents", "with", "chest", "pain", "the", "a", "denies",
    "fever", "stable", "history", "of", "admitted", "today",
]


def make_record(record_id="r1", sex="Male", ethnicity="White", insurance="Other",
                note="He presents with chest pain.", gold=("E119",)):
    return cf.AdmissionRecord(
        record_id=record_id, sex=sex, ethnicity=ethnicity,
        insurance=insurance, note=note, gold_codes=frozenset(gold),
    )


@pytest.fixture(scope="module")
def lexicon():
    return cf.GenderedLexicon.bundled()


def test_bundled_lexicon_loads(lexicon):
    assert len(lexicon.pairs) == 20
    assert ("he", "she") in lexicon.pairs


def test_simple_rewrites(lexicon):
    assert lexicon.apply("he is stable", "m2f") == "she is stable"
    assert lexicon.apply("she is stable", "f2m") == "he is stable"
    assert lexicon.apply("his father", "m2f") == "her mother"


def test_case_preservation(lexicon):
    src = "He is a 45-year-old man. Mr. Smith reports that his father had diabetes. HE DENIES CHEST PAIN."
    out = lexicon.apply(src, "m2f")
    assert out == "She is a 45-year-old woman. Ms. Smith reports that her mother had diabetes. SHE DENIES CHEST PAIN."


def test_dotted_honorifics_exact_case_only(lexicon):
    # MS. here is multiple sclerosis, not an honorific; it must survive
    assert lexicon.apply("Patient has MS. He is stable.", "f2m") == "Patient has MS. He is stable."
    assert lexicon.apply("Seen by Ms. Jones.", "f2m") == "Seen by Mr. Jones."
    assert lexicon.apply("ms. jones", "f2m") == "ms. jones"


def test_word_boundaries(lexicon):
    assert lexicon.apply("history of mangled shim", "m2f") == "history of mangled shim"
    assert lexicon.apply("female", "m2f") == "female"
    assert lexicon.apply("mandible", "m2f") == "mandible"


def test_single_pass_no_rematching():
    lex = cf.GenderedLexicon([("abc", "xyz"), ("xyz", "qqq")])
    # a second pass would turn abc into qqq
    assert lex.apply("abc", "m2f") == "xyz"


def test_first_row_wins():
    lex = cf.GenderedLexicon([("his", "her"), ("him", "her")])
    assert lex.apply("her", "f2m") == "his"
    lex2 = cf.GenderedLexicon([("a", "x"), ("a", "y")])
    assert lex2.apply("a", "m2f") == "x"


def test_him_is_one_way(lexicon):
    assert lexicon.apply("him", "m2f") == "her"
    assert lexicon.apply("her", "f2m") == "his"


def test_involution_over_bijective_tokens(lexicon):
    rng = random.Random(20240917)
    shapes = [str.lower, str.capitalize, str.upper]
    for _ in range(200):
        words = []
        for _ in range(rng.randint(3, 30)):
            if rng.random() < 0.4:
                w = rng.choice(BIJECTIVE_MALE)
                w = rng.choice(shapes)(w)
            elif rng.random() < 0.1:
                w = "Mr."
            else:
                w = rng.choice(NEUTRAL)
            if rng.random() < 0.2:
                w += rng.choice([".", ",", ";"])
            words.append(w)
        text = " ".join(words)
        assert lexicon.apply(lexicon.apply(text, "m2f"), "f2m") == text


def test_rewrite_preserves_token_count(lexicon):
    rng = random.Random(7)
    vocab = BIJECTIVE_MALE + NEUTRAL + ["him", "Mr."]
    for _ in range(100):
        text = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 40)))
        out = lexicon.apply(text, "m2f")
        src_toks, out_toks = text.split(), out.split()
        assert len(src_toks) == len(out_toks)
        for s, o in zip(src_toks, out_toks):
            if s in NEUTRAL:
                assert s == o


def test_lexicon_rejects_bad_rows():
    with pytest.raises(ValidationError):
        cf.GenderedLexicon([])
    with pytest.raises(ValidationError):
        cf.GenderedLexicon([("he", "")])


def test_lexicon_from_tsv(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("# comment\nhe\tshe\n\nman\twoman\n")
    lex = cf.GenderedLexicon.from_tsv(p)
    assert lex.apply("he is a man", "m2f") == "she is a woman"
    bad = tmp_path / "bad.tsv"
    bad.write_text("he she\n")
    with pytest.raises(ValidationError, match="line 1"):
        cf.GenderedLexicon.from_tsv(bad)


def test_apply_rejects_bad_direction(lexicon):
    with pytest.raises(ValidationError):
        lexicon.apply("he", "forward")


def test_record_validation():
    with pytest.raises(ValidationError, match="gold_codes"):
        make_record(gold=())
    with pytest.raises(ValidationError, match="sex"):
        make_record(sex="M")
    with pytest.raises(ValidationError, match="ethnicity"):
        make_record(ethnicity="white")
    with pytest.raises(ValidationError, match="insurance"):
        make_record(insurance="Private")


def test_is_sex_specific(toy_hierarchy):
    from clinbias.icd import SexSpecificSets
    sets = SexSpecificSets(female_only=frozenset({"N800"}), male_only=frozenset({"N400"}))
    assert make_record(gold=("N800", "E119")).is_sex_specific(sets)
    assert make_record(gold=("N400",)).is_sex_specific(sets)
    assert not make_record(gold=("E119", "B20")).is_sex_specific(sets)


def test_counterfactual_sex_rewrites_note(lexicon):
    rec = make_record(note="He reports his pain started yesterday. Mr. Doe is stable.")
    v = cf.make_counterfactual(rec, "Sex", "Female", lexicon)
    assert v.rewritten_note == "She reports her pain started yesterday. Ms. Doe is stable."
    assert v.changed_axis == "Sex" and v.new_value == "Female"
    assert not v.is_factual


def test_counterfactual_other_axes_byte_identical(lexicon):
    rec = make_record(note="He reports his pain. Mr. Doe is stable.")
    for axis, value in [("Ethnicity", "Black"), ("Ethnicity", "Hispanic"),
                        ("Ethnicity", "Asian"), ("Insurance", "Medicaid"),
                        ("Insurance", "Medicare")]:
        v = cf.make_counterfactual(rec, axis, value, lexicon)
        assert v.rewritten_note == rec.note
        assert v.rewritten_note is rec.note


def test_counterfactual_rejects_no_op(lexicon):
    rec = make_record()
    with pytest.raises(ValidationError, match="already"):
        cf.make_counterfactual(rec, "Sex", "Male", lexicon)
    with pytest.raises(ValidationError, match="already"):
        cf.make_counterfactual(rec, "Ethnicity", "White", lexicon)


def test_counterfactual_rejects_unknown_axis_or_value(lexicon):
    rec = make_record()
    with pytest.raises(ValidationError):
        cf.make_counterfactual(rec, "Age", "80", lexicon)
    with pytest.raises(ValidationError):
        cf.make_counterfactual(rec, "Ethnicity", "Martian", lexicon)


def test_variant_descriptor():
    rec = make_record()
    f = cf.factual_variant(rec, "DemographicsFirst")
    assert f.is_factual
    assert f.descriptor == "factual|DemographicsFirst"
    v = cf.make_counterfactual(rec, "Insurance", "Medicare", placement="DemographicsLast")
    assert v.descriptor == "Insurance=Medicare|DemographicsLast"


def test_variant_invariants():
    with pytest.raises(ValidationError):
        cf.CounterfactualVariant("r1", None, "Female", "note", "DemographicsFirst")
    with pytest.raises(ValidationError):
        cf.CounterfactualVariant("r1", "Sex", "Female", "note", "Sideways")


def test_variant_plan_counts(lexicon):
    rec = make_record()
    plan = cf.variant_plan([rec], lexicon=lexicon)
    # factual x2 + (1 sex + 3 ethnicity + 2 insurance) x2 = 14
    assert len(plan) == 14
    assert sum(1 for _, v in plan if v.is_factual) == 2
    descriptors = {v.descriptor for _, v in plan}
    assert len(descriptors) == 14

    sex_only = cf.variant_plan([rec], axes_config={"Sex": ("Female",)}, lexicon=lexicon)
    assert len(sex_only) == 4


def test_variant_plan_cohort_size(lexicon):
    records = [make_record(record_id=f"r{i}") for i in range(199)]
    plan = cf.variant_plan(records, lexicon=lexicon)
    assert len(plan) == 199 * 14 == 2786


def test_variant_plan_excludes_non_baseline(lexicon):
    good = make_record(record_id="ok")
    off = make_record(record_id="off", sex="Female")
    with pytest.warns(UserWarning, match="record off.*not the baseline"):
        plan = cf.variant_plan([good, off], lexicon=lexicon)
    assert {r.record_id for r, _ in plan} == {"ok"}


def test_variant_plan_rejects_unknown_axis(lexicon):
    with pytest.raises(ValidationError, match="Age"):
        cf.variant_plan([make_record()], axes_config={"Age": ("80",)}, lexicon=lexicon)


def test_render_prompt_placements():
    rec = make_record(note="Chest pain for two days.")
    template = "Intro.\n\n{demographics}\n\n{note}\n\nDiagnoses:\n"
    first = cf.render_prompt(rec, template, "DemographicsFirst")
    assert first == (
        "Intro.\n\nDemographics: sex: Male; ethnicity: White; insurance: Other.\n\n"
        "Chest pain for two days.\n\nDiagnoses:\n"
    )
    last = cf.render_prompt(rec, template, "DemographicsLast")
    assert last == (
        "Intro.\n\nChest pain for two days.\n\n"
        "Demographics: sex: Male; ethnicity: White; insurance: Other.\n\nDiagnoses:\n"
    )


def test_render_prompt_uses_variant_note_and_demographics(lexicon):
    rec = make_record(note="He is stable.")
    v = cf.make_counterfactual(rec, "Sex", "Female", lexicon)
    out = cf.render_prompt(rec, "{demographics} {note}", "DemographicsFirst", variant=v)
    assert out == "Demographics: sex: Female; ethnicity: White; insurance: Other. She is stable."


def test_render_prompt_template_errors():
    rec = make_record()
    with pytest.raises(TemplateError, match=r"\{note\}"):
        cf.render_prompt(rec, "{demographics} only", "DemographicsFirst")
    with pytest.raises(TemplateError, match=r"\{demographics\}"):
        cf.render_prompt(rec, "{note} only", "DemographicsFirst")
    blank = make_record(note="   ")
    with pytest.raises(TemplateError, match="empty clinical note"):
        cf.render_prompt(blank, "{demographics} {note}", "DemographicsFirst")


def test_render_prompt_note_with_braces():
    rec = make_record(note="Sodium {low} noted.")
    out = cf.render_prompt(rec, "{demographics} {note}", "DemographicsFirst")
    assert out.endswith("Sodium {low} noted.")


def test_default_template_renders():
    template = cf.default_template()
    out = cf.render_prompt(make_record(), template, "DemographicsFirst")
    assert out.endswith("Diagnoses:\n")
    assert "Demographics: sex: Male" in out


def test_load_records_roundtrip(tmp_path):
    rows = [
        {"record_id": "a", "sex": "Male", "ethnicity": "White", "insurance": "Other",
         "note": "He is stable.", "gold_codes": ["E11.9", "B20"]},
        {"record_id": "b", "sex": "Female", "ethnicity": "Asian", "insurance": "Medicare",
         "note": "She is stable.", "gold_codes": ["N80.0"]},
    ]
    p = tmp_path / "records.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    records = cf.load_records(p)
    assert [r.record_id for r in records] == ["a", "b"]
    assert records[0].gold_codes == frozenset({"E119", "B20"})  # codes stored dotless
    assert records[1].gold_codes == frozenset({"N800"})


def test_load_records_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"record_id": "a", "sex": "Male"}\n')
    with pytest.raises(ValidationError, match="line 1: missing field"):
        cf.load_records(p)
    p.write_text("not json\n")
    with pytest.raises(ValidationError, match="line 1: bad JSON"):
        cf.load_records(p)
    row = {"record_id": "a", "sex": "Male", "ethnicity": "White", "insurance": "Other",
           "note": "x", "gold_codes": ["E119"]}
    p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(ValidationError, match="duplicate record_id a"):
        cf.load_records(p)
    row["gold_codes"] = ["not a code"]
    p.write_text(json.dumps(row) + "\n")
    with pytest.raises(ValidationError, match="line 1"):
        cf.load_records(p)
