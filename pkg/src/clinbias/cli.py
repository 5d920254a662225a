"""Command-line orchestration.

Subcommands: ingest, probe-intrinsic, run-extrinsic, score, stats,
report.  One declarative config file drives everything; secrets and
machine-local reference paths come from the environment.

Exit codes: 0 success, 2 validation error, 3 backend transport error,
4 incomplete run (progress is checkpointed; re-run to resume).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, counterfactual, extrinsic, intrinsic, reports, stimuli
from .config import load_config, make_backend, require_paths
from .errors import (
    CapabilityError,
    CodeLookupError,
    IncompleteRunError,
    TransportError,
    ValidationError,
)
from .icd import load_sex_specific, parse_code_table
from .provider import ProbeRunner, ResultCache

ASSOC_ARTIFACTS = (
    ("assoc_joint.json", "Joint"),
    ("assoc_sex.json", "Sex"),
    ("assoc_ethnicity.json", "Ethnicity"),
)
PREDICTIONS_ARTIFACT = "predictions.jsonl"


def _hierarchy(config):
    paths = require_paths(config, "code_table")
    return parse_code_table(paths["code_table"])


def _sex_sets(config):
    if not (config.female_codes or config.male_codes):
        return None
    paths = require_paths(config, "female_codes", "male_codes")
    return load_sex_specific(paths["female_codes"], paths["male_codes"])


def _stimuli_groups(config):
    if config.stimuli_path:
        paths = require_paths(config, "stimuli_path")
        return stimuli.load_stimuli(paths["stimuli_path"])
    frozen = Path(config.out_dir) / "stimuli.json"
    if frozen.exists():
        return stimuli.load_stimuli(frozen)
    raise ValidationError(
        "no stimuli available: set stimuli_path, or set names_csv and run ingest"
    )


def _records(config):
    paths = require_paths(config, "records_path")
    return counterfactual.load_records(paths["records_path"])


def _template(config):
    if config.template_path:
        paths = require_paths(config, "template_path")
        return counterfactual.load_template(paths["template_path"])
    return counterfactual.default_template()


def _provenance(config, hierarchy=None, groups=None) -> dict:
    return {
        "config_hash": config.config_hash,
        "hierarchy_hash": hierarchy.content_hash if hierarchy is not None else "n/a",
        "stimuli_hash": stimuli.stimuli_hash(groups) if groups else "n/a",
        # derived from config, not the live object, so offline re-scoring
        # reproduces the exact bytes of the online run
        "backend_id": f"{config.backend_kind}:{config.model_id}",
        "toolkit_version": __version__,
    }


def _emit(config, stem: str, tables, provenance) -> list:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = reports.BiasReport(tuple(tables), provenance)
    written = []
    for suffix in (".csv", ".md", ".json"):
        path = out_dir / f"{stem}{suffix}"
        reports.write_report(path, report)
        written.append(path)
        print(f"wrote {path}")
    return written


def cmd_ingest(args) -> int:
    config = load_config(args.config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    hierarchy = _hierarchy(config)
    print(f"hierarchy: {hierarchy.n_nodes} identifiers, "
          f"{len(hierarchy.l5_codes)} full codes, hash {hierarchy.content_hash[:12]}")

    if config.names_csv:
        paths = require_paths(config, "names_csv")
        groups = stimuli.ingest_baby_names(paths["names_csv"], k=config.names_per_group)
    elif config.stimuli_path:
        groups = _stimuli_groups(config)
    else:
        raise ValidationError("ingest needs names_csv or stimuli_path")
    frozen = out_dir / "stimuli.json"
    stimuli.save_stimuli(groups, frozen)
    print(f"stimuli: {len(groups)} groups x {len(groups[0].names)} names -> {frozen}")

    sex_sets = _sex_sets(config)
    if sex_sets is not None:
        print(f"sex-specific lists: {len(sex_sets.female_only)} female-only, "
              f"{len(sex_sets.male_only)} male-only")

    if config.records_path:
        records = _records(config)
        print(f"records: {len(records)} admissions")
        tables = reports.stats_tables(records, hierarchy, sex_sets)
        _emit(config, "dataset_stats", tables, _provenance(config, hierarchy, groups))
    return 0


def _intrinsic_tables(config, hierarchy):
    out_dir = Path(config.out_dir)
    sex_sets = _sex_sets(config)
    exclude = sex_sets.union if sex_sets is not None else frozenset()

    tables = []
    loaded = {}
    for filename, axis in ASSOC_ARTIFACTS:
        path = out_dir / filename
        if not path.exists():
            raise ValidationError(f"missing artifact {path}; run probe-intrinsic first")
        loaded[axis] = intrinsic.load_association_table(path)
    for axis, title in (
        ("Joint", "AssocMAD, joint sex x ethnicity groups"),
        ("Sex", "AssocMAD, Sex marginals"),
        ("Ethnicity", "AssocMAD, Ethnicity marginals"),
    ):
        rep = intrinsic.assoc_mad_report(loaded[axis], hierarchy, exclude_codes=exclude)
        tables.append(reports.assoc_mad_table(rep, title))
    if sex_sets is not None:
        pref = intrinsic.correctness_of_sex_preference(loaded["Sex"], sex_sets)
        tables.append(reports.sex_preference_table(pref))
    return tables


def cmd_probe_intrinsic(args) -> int:
    config = load_config(args.config)
    hierarchy = _hierarchy(config)
    groups = _stimuli_groups(config)
    backend = make_backend(config)
    cache = ResultCache(config.cache_dir)
    runner = ProbeRunner(backend, cache, mode=config.probe_mode,
                         max_workers=config.max_workers)

    queries = intrinsic.probe_queries(hierarchy, groups, config.model_id)
    print(f"probing {len(queries)} (diagnosis, name) continuations")
    results = runner.run_continuations(queries)
    print(f"backend calls this run: {backend.calls}")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_axis = {
        "Joint": groups,
        "Sex": stimuli.marginal_groups(groups, "Sex"),
        "Ethnicity": stimuli.marginal_groups(groups, "Ethnicity"),
    }
    for filename, axis in ASSOC_ARTIFACTS:
        table = intrinsic.build_association_table(results, hierarchy, by_axis[axis],
                                                  config.model_id)
        intrinsic.save_association_table(out_dir / filename, table)
        print(f"wrote {out_dir / filename}")

    tables = _intrinsic_tables(config, hierarchy)
    _emit(config, "intrinsic_report", tables, _provenance(config, hierarchy, groups))
    return 0


def cmd_score(args) -> int:
    config = load_config(args.config)
    hierarchy = _hierarchy(config)
    groups = _stimuli_groups(config)
    tables = _intrinsic_tables(config, hierarchy)
    _emit(config, "intrinsic_report", tables, _provenance(config, hierarchy, groups))
    return 0


def _embedder(config, backend):
    if config.embed_model_id:
        return extrinsic.BackendEmbedder(backend, config.embed_model_id)
    return extrinsic.BagOfCharsEmbedder(dim=config.embed_dim)


def cmd_run_extrinsic(args) -> int:
    config = load_config(args.config)
    hierarchy = _hierarchy(config)
    records = _records(config)
    template = _template(config)
    backend = make_backend(config)
    cache = ResultCache(config.cache_dir)
    runner = ProbeRunner(backend, cache, max_workers=config.max_workers)

    plan = counterfactual.variant_plan(records)
    print(f"{len(records)} records -> {len(plan)} prompts")
    preds = extrinsic.generate_predictions(plan, template, runner, config.model_id,
                                           config.decoding_params())
    index = extrinsic.IcdEmbeddingIndex.build(hierarchy, _embedder(config, backend),
                                              cache_dir=Path(config.cache_dir))
    linked = extrinsic.link_predictions(preds, index)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / PREDICTIONS_ARTIFACT
    extrinsic.save_prediction_sets(pred_path, linked)
    print(f"wrote {pred_path}")

    report = extrinsic.extrinsic_report(linked, records, hierarchy, _sex_sets(config))
    _emit(config, "extrinsic_report", reports.extrinsic_tables(report),
          _provenance(config, hierarchy))
    return 0


def cmd_stats(args) -> int:
    config = load_config(args.config)
    hierarchy = _hierarchy(config)
    records = _records(config)
    tables = reports.stats_tables(records, hierarchy, _sex_sets(config))
    provenance = _provenance(config, hierarchy)
    _emit(config, "dataset_stats", tables, provenance)
    sys.stdout.write(reports.render_csv(reports.BiasReport(tuple(tables), provenance)))
    return 0


def cmd_report(args) -> int:
    config = load_config(args.config)
    hierarchy = _hierarchy(config)
    out_dir = Path(config.out_dir)

    tables = []
    groups = None
    if (out_dir / ASSOC_ARTIFACTS[0][0]).exists():
        groups = _stimuli_groups(config)
        tables += _intrinsic_tables(config, hierarchy)
    pred_path = out_dir / PREDICTIONS_ARTIFACT
    if pred_path.exists():
        linked = extrinsic.load_prediction_sets(pred_path)
        records = _records(config)
        report = extrinsic.extrinsic_report(linked, records, hierarchy, _sex_sets(config))
        tables += reports.extrinsic_tables(report)
    if not tables:
        raise ValidationError(
            f"no artifacts in {out_dir}; run probe-intrinsic or run-extrinsic first"
        )
    _emit(config, "bias_report", tables, _provenance(config, hierarchy, groups))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clinbias",
        description="Measure intrinsic and extrinsic clinical bias of language models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = (
        ("ingest", cmd_ingest, "Validate inputs, freeze artifacts, emit dataset stats."),
        ("probe-intrinsic", cmd_probe_intrinsic,
         "Probe name-continuation probabilities and score AssocMAD."),
        ("run-extrinsic", cmd_run_extrinsic,
         "Generate diagnosis predictions under counterfactuals and score recall."),
        ("score", cmd_score, "Re-score intrinsic reports offline from saved artifacts."),
        ("stats", cmd_stats, "Emit dataset distribution summaries."),
        ("report", cmd_report, "Render the combined bias report from saved artifacts."),
    )
    for name, func, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run config YAML")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, CodeLookupError, CapabilityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return 3
    except IncompleteRunError as e:
        print(f"incomplete run: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
