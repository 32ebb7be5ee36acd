"""Command-line entry point.

Every subcommand reads a JSON configuration (``--config``) whose keys match
``PipelineConfig``; the common flags override individual keys.  Stages persist
their outputs in the output directory so they can be chained:

    extract -> train -> shap -> aggregate -> classify

``run`` does all of them at once.  Exit codes: 0 success, 2 configuration
error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reports
from .evaluation import classify_archetype
from .errors import BranchscopeError, ConfigError, ConfigInvalid, DataError, MissingFile
from .pipeline import (
    FeatureTable,
    PipelineConfig,
    ablate_eigencount,
    aggregate,
    component_spectra,
    extract,
    open_source,
    own_class_shap,
    penalty_ablation,
    resolve_scores,
    run_pipeline,
    strategy_records,
    train,
)
from .reference import KNOWN_LABEL_MISMATCHES, PUBLISHED_PEARSON, PUBLISHED_ROWS, PUBLISHED_SPEARMAN
from .synth import SynthConfig, expert_config, generate
from .treeshap import read_shap_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for key in ("jobs", "seed", "out", "scores", "k", "dataset"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "model_scores", False):
        overrides["use_model_scores"] = True
    cfg = replace(cfg, **overrides) if overrides else cfg
    return cfg


def _out(cfg: PipelineConfig) -> Path:
    if not cfg.out:
        raise ConfigInvalid("no output directory: pass --out or set \"out\"")
    return Path(cfg.out)


def _features(out: Path) -> FeatureTable:
    return reports.read_features(out / reports.FEATURES)


def _own_phi(out: Path, table: FeatureTable, model) -> np.ndarray:
    path = out / reports.SHAP
    if not path.is_file():
        raise MissingFile(f"{path} does not exist; run the shap stage first", module="cli")
    attrs = {a.sample_id: a for a in read_shap_csv(path)}
    rows = []
    for sid, lab in zip(table.sample_ids, table.labels):
        a = attrs.get(sid)
        if a is None or a.class_index != model.classes.index(lab):
            raise DataError(f"{path}: no own-class attribution for {sid!r}", module="cli")
        rows.append(np.pad(a.phi, (0, model.feature_count - len(a.phi))))
    return np.array(rows).reshape(len(rows), model.feature_count)


def _reports_from_disk(cfg: PipelineConfig):
    out = _out(cfg)
    table = _features(out)
    model = reports.read_model(out / reports.MODEL)
    layout = open_source(cfg).layout
    phi = _own_phi(out, table, model)
    return table, model, aggregate(phi, table, layout, model.classes, cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract(args) -> None:
    cfg = _config(args)
    reports.write_features(_out(cfg) / reports.FEATURES, extract(open_source(cfg), cfg))


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    reports.write_model(out / reports.MODEL, train(_features(out), cfg))


def cmd_shap(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    table = _features(out)
    model = reports.read_model(out / reports.MODEL)
    phi, base = own_class_shap(model, table, cfg.jobs)
    reports.write_own_shap(out / reports.SHAP, table, model, phi, base)


def cmd_aggregate(args) -> None:
    cfg = _config(args)
    table, model, reps = _reports_from_disk(cfg)
    scores = resolve_scores(table, cfg, model)
    records = strategy_records(reps, table, scores, cfg)
    out = _out(cfg)
    reports.write_table3(out / reports.TABLE3, records)
    reports.write_table4(out / reports.TABLE4, records)


def cmd_classify(args) -> None:
    cfg = _config(args)
    table, model, reps = _reports_from_disk(cfg)
    records = strategy_records(reps, table, resolve_scores(table, cfg, model), cfg)
    reports.write_aggregates(_out(cfg), records)
    for r in records:
        print(f"{r.attack}\t{100 * r.eer:.2f}\t{r.dominant_block}\t"
              f"{100 * r.dominant_share:.2f}\t{r.archetype.value}")


def cmd_ablate_eig(args) -> None:
    cfg = _config(args)
    ks = tuple(args.ks) if args.ks else None
    source = open_source(cfg)
    recs = ablate_eigencount(cfg, ks, source, component_spectra(source, cfg.jobs))
    reports.write_eig_ablation(_out(cfg) / reports.EIG_CSV, recs)
    for r in recs:
        print(f"k={r.k}\tf1={r.f1_macro:.4f}\tretention={r.f1_retention_pct:.1f}%\t"
              f"savings={r.memory_savings_pct:.1f}%")


def cmd_ablate_penalty(args) -> None:
    cfg = _config(args)
    out = _out(cfg)
    if (out / reports.SHAP).is_file() and (out / reports.MODEL).is_file():
        _, _, reps = _reports_from_disk(cfg)
    else:
        reps = run_pipeline(cfg, write=False).reports
    abl = penalty_ablation(reps, cfg.penalties)
    reports.write_penalty_ablation(out / reports.PENALTY_CSV, abl)
    for p in abl.penalties:
        print(f"{p.value}\ttau={abl.tau[p]:.4f}")


def cmd_run(args) -> None:
    cfg = _config(args)
    _out(cfg)
    result = run_pipeline(cfg)
    for r in result.records:
        print(f"{r.attack}\t{100 * r.eer:.2f}\t{r.dominant_block}\t"
              f"{100 * r.dominant_share:.2f}\t{r.archetype.value}")


def _synth_config(args) -> SynthConfig:
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.k is not None:
        extra["k"] = args.k
    if args.synth_config:
        try:
            data = json.loads(Path(args.synth_config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read {args.synth_config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid("synth configuration must be a JSON object")
        return SynthConfig.from_dict({**data, **extra})
    for key in ("D", "N", "samples_per_class"):
        v = getattr(args, key)
        if v is not None:
            extra[key] = v
    return expert_config(consensus=args.consensus, **extra)


def cmd_synth(args) -> None:
    if not args.out:
        raise ConfigInvalid("synth needs --out")
    path = generate(_synth_config(args)).save(args.out)
    print(path)


def cmd_report(args) -> None:
    if args.reference:
        out = Path(args.out or ".")
        points = [reports.MatrixPoint(r.attack, r.eer, r.shares[0], r.label) for r in PUBLISHED_ROWS]
        reports.emit_strategy_matrix(points, out / reports.MATRIX_SVG, out / reports.MATRIX_CSV)
        reports.write_table2(out / reports.TABLE2, points)
        derived = reports.correlations(points)
        reports.write_json(out / reports.SUMMARY, {
            "source": "published per-attack rows",
            "correlation_share_vs_eer": derived,
            "published_correlation": {"pearson": PUBLISHED_PEARSON, "spearman": PUBLISHED_SPEARMAN},
            "label_mismatches": sorted(KNOWN_LABEL_MISMATCHES),
        })
        for r in PUBLISHED_ROWS:
            rule = classify_archetype(r.eer, r.shares[0])
            note = "" if rule is r.label else "\t(rule: " + rule.value + ")"
            flag = " [known mismatch]" if r.attack in KNOWN_LABEL_MISMATCHES else ""
            print(f"{r.attack}\t{r.eer:.2f}\t{r.shares[0]:.2f}\t{r.label.value}{note}{flag}")
        print(f"share vs EER over these rows: pearson={derived['pearson']:.3f} "
              f"spearman={derived['spearman']:.3f} (published {PUBLISHED_PEARSON}, {PUBLISHED_SPEARMAN})")
        return
    cfg = _config(args)
    out = _out(cfg)
    rows = reports.read_table1(out / reports.TABLE1)
    reports.emit_strategy_matrix(rows, out / reports.MATRIX_SVG, out / reports.MATRIX_CSV)
    reports.write_table2(out / reports.TABLE2, rows)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--dataset", help="manifest path (overrides the configuration)")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--scores", help="detector score CSV: sample_id,label,score")
    common.add_argument("--k", type=int, help="eigenvalues kept per component")
    common.add_argument("--model-scores", action="store_true",
                        help="fall back to the meta-classifier's spoof probability for EER")

    parser = argparse.ArgumentParser(prog="branchscope",
                                     description="Spectral branch attribution for multi-branch detectors")
    sub = parser.add_subparsers(dest="command", required=True)
    simple = [
        ("extract", cmd_extract, "spectral signatures -> features.csv"),
        ("train", cmd_train, "fit the meta-classifier -> model.json"),
        ("shap", cmd_shap, "own-class TreeSHAP values -> shap_values.csv"),
        ("aggregate", cmd_aggregate, "branch sums, confidences and shares -> table3/table4"),
        ("classify", cmd_classify, "EER and archetypes -> table1, strategy matrix"),
        ("ablate-penalty", cmd_ablate_penalty, "dominant block per penalty and Kendall tau"),
        ("run", cmd_run, "the full pipeline"),
    ]
    for name, fn, text in simple:
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate-eig", parents=[common], help="macro-F1 and memory versus k")
    p.add_argument("--ks", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate_eig)

    p = sub.add_parser("synth", parents=[common], help="write a planted synthetic dataset")
    p.add_argument("--synth-config", help="JSON SynthConfig; default is one expert per branch")
    p.add_argument("--consensus", type=int, default=1)
    p.add_argument("--D", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", parents=[common], help="re-render the strategy matrix")
    p.add_argument("--reference", action="store_true",
                   help="render the published per-attack rows instead of a run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(exc, file=sys.stderr)
        return EXIT_DATA
    except BranchscopeError as exc:
        print(exc, file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
