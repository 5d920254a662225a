"""Rewrite one demographic axis at a time and render the prompts.

Sex counterfactuals pass the note through a word-level gendered lexicon
(case-preserving, single-pass, honorifics matched with their dot so the
clinical abbreviation "MS." survives).  Ethnicity and insurance changes
leave the note byte-identical; only the demographics block moves.
"""

from clinbias import counterfactual as cf

lexicon = cf.GenderedLexicon.bundled()

note = ("He is a 62-year-old man with MS. Mr. Rivera reports that his father "
        "had type 2 diabetes. HE DENIES CHEST PAIN.")
print("original: ", note)
print("to female:", lexicon.apply(note, "m2f"))
print()
print("round trip restores bytes:",
      lexicon.apply(lexicon.apply(note, "m2f"), "f2m") == note)

record = cf.AdmissionRecord(
    record_id="demo-1", sex="Male", ethnicity="White", insurance="Other",
    note=note, gold_codes=frozenset({"E119"}),
)

plan = cf.variant_plan([record])
print(f"\none baseline record -> {len(plan)} prompts "
      f"(factual + 6 counterfactuals, each at 2 placements)")
for _, variant in plan:
    print(" ", variant.descriptor)

print("\nnon-sex axes never touch the note:")
v = cf.make_counterfactual(record, "Insurance", "Medicaid", lexicon)
print("  byte-identical:", v.rewritten_note == record.note)

template = cf.default_template()
print("\nrendered prompt, demographics first:\n")
print(cf.render_prompt(record, template, "DemographicsFirst",
                       variant=cf.make_counterfactual(record, "Sex", "Female", lexicon)))
