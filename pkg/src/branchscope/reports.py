"""Report files: CSV tables, the strategy-matrix SVG and the JSON summary.

Every CSV written here has a matching reader so outputs can be reloaded.
Floats are written with ``repr`` and reports carry no timestamps, so equal
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attribution import Penalty
from .errors import EmptyInput, IoFailure, MissingFile, SchemaViolation, ZeroVariance
from .evaluation import ArchetypeLabel, group_stats, pearson, spearman
from .gbdt import TreeEnsemble
from .treeshap import ShapAttribution, write_shap_csv

TABLE1 = "table1.csv"
TABLE2 = "table2_archetypes.csv"
TABLE3 = "table3_phi.csv"
TABLE4 = "table4_shares.csv"
MATRIX_CSV = "strategy_matrix.csv"
MATRIX_SVG = "strategy_matrix.svg"
EIG_CSV = "eig_ablation.csv"
PENALTY_CSV = "penalty_ablation.csv"
SUMMARY = "summary.json"
FEATURES = "features.csv"
MODEL = "model.json"
SHAP = "shap_values.csv"


def _num(x: float) -> str:
    return repr(float(x))


def _open_write(path: str | os.PathLike):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}", module="cli") from exc


def write_rows(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_rows(path: str | os.PathLike, required: Sequence[str] = ()) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} does not exist", module="cli")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(required) - set(reader.fieldnames or ())
        if missing:
            raise SchemaViolation(f"{path}: missing columns {sorted(missing)}", module="cli")
        return list(reader)


def write_json(path: str | os.PathLike, data) -> None:
    with _open_write(path) as fh:
        fh.write(json.dumps(data, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# features


def write_features(path, table) -> None:
    header = ["sample_id", "label", "detector_score", *table.names]
    rows = ([sid, lab, "" if sc is None else _num(sc), *map(_num, x)]
            for sid, lab, sc, x in zip(table.sample_ids, table.labels, table.detector_scores, table.X))
    write_rows(path, header, rows)


def read_features(path):
    from .pipeline import FeatureTable

    rows = read_rows(path, ["sample_id", "label", "detector_score"])
    with open(path, newline="", encoding="utf-8") as fh:
        names = tuple(next(csv.reader(fh))[3:])
    X = np.array([[float(r[n]) for n in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    return FeatureTable(tuple(r["sample_id"] for r in rows), tuple(r["label"] for r in rows), X, names,
                        tuple(float(r["detector_score"]) if r["detector_score"] else None for r in rows))


def write_model(path, model: TreeEnsemble) -> None:
    with _open_write(path) as fh:
        fh.write(model.to_json() + "\n")


def read_model(path) -> TreeEnsemble:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} does not exist", module="cli")
    return TreeEnsemble.from_json(path.read_text(encoding="utf-8"))


def write_own_shap(path, table, model: TreeEnsemble, phi: np.ndarray, base: np.ndarray) -> None:
    attrs = (ShapAttribution(sid, model.classes.index(lab), p, float(b))
             for sid, lab, p, b in zip(table.sample_ids, table.labels, phi, base))
    try:
        write_shap_csv(path, attrs)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}", module="cli") from exc


# ---------------------------------------------------------------------------
# tables


def _pct(x: float) -> float:
    return 100.0 * float(x)


def write_table1(path, records) -> None:
    header = ["attack", "n", "eer_pct", "eer_ci_pct", "dominant_block", "dominant_share_pct",
              "dominant_share_ci_pct", "confidence", "archetype"]
    rows = []
    for r in records:
        d = r.blocks.index(r.dominant_block)
        rows.append([r.attack, r.n, _pct(r.eer), _pct(r.eer_ci), r.dominant_block,
                     _pct(r.dominant_share), _pct(r.share_ci[d]), float(r.dominant_score),
                     r.archetype.value])
    write_rows(path, header, rows)


@dataclass(frozen=True)
class Table1Row:
    attack: str
    n: int
    eer_pct: float
    eer_ci_pct: float
    dominant_block: str
    dominant_share_pct: float
    dominant_share_ci_pct: float
    confidence: float
    archetype: ArchetypeLabel


def read_table1(path) -> list[Table1Row]:
    rows = read_rows(path, Table1Row.__dataclass_fields__)
    return [Table1Row(r["attack"], int(r["n"]), float(r["eer_pct"]), float(r["eer_ci_pct"]),
                      r["dominant_block"], float(r["dominant_share_pct"]),
                      float(r["dominant_share_ci_pct"]), float(r["confidence"]),
                      ArchetypeLabel(r["archetype"]))
            for r in rows]


def write_table3(path, records) -> None:
    pens = [p for p in Penalty]
    header = ["attack", "block", "phi", "phi_ci", *[f"c_{p.value.lower()}" for p in pens]]
    rows = []
    for r in records:
        for j, b in enumerate(r.blocks):
            rows.append([r.attack, b, float(r.phi[j]), float(r.phi_ci[j]),
                         *[float(r.scores[p][j]) if p in r.scores else "" for p in pens]])
    write_rows(path, header, rows)


def read_table3(path) -> list[dict]:
    rows = read_rows(path, ["attack", "block", "phi", "phi_ci"])
    out = []
    for r in rows:
        d = {"attack": r["attack"], "block": r["block"], "phi": float(r["phi"]),
             "phi_ci": float(r["phi_ci"])}
        for p in Penalty:
            v = r.get(f"c_{p.value.lower()}", "")
            d[p] = float(v) if v else None
        out.append(d)
    return out


def write_table4(path, records) -> None:
    rows = [[r.attack, b, _pct(r.shares[j]), _pct(r.share_ci[j])]
            for r in records for j, b in enumerate(r.blocks)]
    write_rows(path, ["attack", "block", "share_pct", "share_ci_pct"], rows)


def read_table4(path) -> list[dict]:
    return [{"attack": r["attack"], "block": r["block"], "share_pct": float(r["share_pct"]),
             "share_ci_pct": float(r["share_ci_pct"])}
            for r in read_rows(path, ["attack", "block", "share_pct", "share_ci_pct"])]


def write_table2(path, points: Sequence[tuple[str, float, float]]) -> None:
    stats = group_stats([(label, share) for _, _, share, label in _points4(points)])
    write_rows(path, ["label", "mean", "std", "var", "count"],
               [[g.label, g.mean, g.std, g.var, g.count] for g in stats])


def read_table2(path) -> list[dict]:
    return [{"label": r["label"], "mean": float(r["mean"]), "std": float(r["std"]),
             "var": float(r["var"]), "count": int(r["count"])}
            for r in read_rows(path, ["label", "mean", "std", "var", "count"])]


# ---------------------------------------------------------------------------
# strategy matrix


@dataclass(frozen=True)
class MatrixPoint:
    attack: str
    eer: float              # percent
    dominant_share: float   # percent
    label: ArchetypeLabel


def matrix_points(records) -> list[MatrixPoint]:
    out = []
    for r in records:
        if isinstance(r, MatrixPoint):
            out.append(r)
        elif hasattr(r, "dominant_share_pct"):
            out.append(MatrixPoint(r.attack, r.eer_pct, r.dominant_share_pct, r.archetype))
        else:
            out.append(MatrixPoint(r.attack, _pct(r.eer), _pct(r.dominant_share), r.archetype))
    return out


def _points4(points):
    for p in matrix_points(points):
        yield p.attack, p.eer, p.dominant_share, p.label.value


def read_strategy_csv(path) -> list[MatrixPoint]:
    return [MatrixPoint(r["attack"], float(r["eer"]), float(r["dominant_share"]),
                        ArchetypeLabel(r["label"]))
            for r in read_rows(path, ["attack", "eer", "dominant_share", "label"])]


_COLORS = {
    ArchetypeLabel.EFFECTIVE_SPECIALIZATION: "#1b9e77",
    ArchetypeLabel.EFFECTIVE_CONSENSUS: "#7570b3",
    ArchetypeLabel.INEFFECTIVE_CONSENSUS: "#888888",
    ArchetypeLabel.INEFFECTIVE_SPECIALIZATION: "#e6ab02",
    ArchetypeLabel.FLAWED_SPECIALIZATION: "#d95f02",
}

_W, _H = 640, 440
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 20, 20, 60
_EER_FLOOR = 0.01  # percent; the log axis starts here


def _svg(points: list[MatrixPoint], share_line: float, eer_lines: Sequence[float]) -> str:
    xmax = max(40.0, math.ceil(max(p.dominant_share for p in points) / 10 + 0.5) * 10)
    ylo, yhi = math.log10(_EER_FLOOR), 2.0
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def sx(share):
        return _LEFT + pw * min(max(share, 0.0), xmax) / xmax

    def sy(e):
        v = math.log10(max(e, _EER_FLOOR))
        return _TOP + ph * (yhi - v) / (yhi - ylo)

    f = "{:.2f}".format
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in range(0, int(xmax) + 1, 10):
        x = f(sx(t))
        out.append(f'<line x1="{x}" y1="{_TOP + ph}" x2="{x}" y2="{_TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{_TOP + ph + 16}" text-anchor="middle">{t}</text>')
    for e in (0.01, 0.1, 1, 10, 100):
        y = f(sy(e))
        out.append(f'<line x1="{_LEFT - 4}" y1="{y}" x2="{_LEFT}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{_LEFT - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{e:g}</text>')
    out.append(f'<text x="{_LEFT + pw / 2}" y="{_H - 18}" text-anchor="middle">Dominant share (%)</text>')
    out.append(f'<text x="16" y="{_TOP + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_TOP + ph / 2})">EER (%)</text>')
    x = f(sx(share_line))
    out.append(f'<line class="guide-share" x1="{x}" y1="{_TOP}" x2="{x}" y2="{_TOP + ph}" '
               f'stroke="#444" stroke-dasharray="5,4"/>')
    for e in eer_lines:
        y = f(sy(e))
        out.append(f'<line class="guide-eer" x1="{_LEFT}" y1="{y}" x2="{_LEFT + pw}" y2="{y}" '
                   f'stroke="#444" stroke-dasharray="5,4"/>')
    for p in points:
        cx, cy = f(sx(p.dominant_share)), f(sy(p.eer))
        out.append(f'<circle class="point" cx="{cx}" cy="{cy}" r="5" fill="{_COLORS[p.label]}" '
                   f'stroke="black" stroke-width="0.5"><title>{p.attack}: {p.label.value}</title></circle>')
        out.append(f'<text x="{f(float(cx) + 7)}" y="{f(float(cy) - 6)}">{p.attack}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_strategy_matrix(records, svg_path, csv_path=None, share_line: float = 20.0,
                         eer_lines: Sequence[float] = (1.0, 10.0)) -> list[MatrixPoint]:
    """Scatter of (dominant share, EER) with quadrant guides, plus a CSV twin."""
    points = matrix_points(records)
    if not points:
        raise EmptyInput("strategy matrix needs at least one record", module="cli")
    with _open_write(svg_path) as fh:
        fh.write(_svg(points, share_line, eer_lines))
    if csv_path is None:
        csv_path = Path(svg_path).with_suffix(".csv")
    write_rows(csv_path, ["attack", "eer", "dominant_share", "label"],
               [[p.attack, float(p.eer), float(p.dominant_share), p.label.value] for p in points])
    return points


# ---------------------------------------------------------------------------
# ablations


def write_penalty_ablation(path, ablation) -> None:
    header = ["attack", *[p.value for p in ablation.penalties]]
    rows = [[a, *[ablation.dominant[a][p] for p in ablation.penalties]] for a in ablation.attacks]
    rows.append(["tau_vs_linear", *[float(ablation.tau[p]) for p in ablation.penalties]])
    write_rows(path, header, rows)


def read_penalty_ablation(path):
    from .pipeline import PenaltyAblation

    rows = read_rows(path, ["attack"])
    with open(path, newline="", encoding="utf-8") as fh:
        pens = tuple(Penalty(h) for h in next(csv.reader(fh))[1:])
    attacks, dominant, tau = [], {}, {}
    for r in rows:
        if r["attack"] == "tau_vs_linear":
            tau = {p: float(r[p.value]) for p in pens}
        else:
            attacks.append(r["attack"])
            dominant[r["attack"]] = {p: r[p.value] for p in pens}
    return PenaltyAblation(tuple(attacks), pens, dominant, tau)


def write_eig_ablation(path, records) -> None:
    write_rows(path, ["k", "f1_macro", "memory_bytes", "f1_retention_pct", "memory_savings_pct"],
               [[r.k, float(r.f1_macro), r.memory_bytes, float(r.f1_retention_pct),
                 float(r.memory_savings_pct)] for r in records])


def read_eig_ablation(path):
    from .pipeline import EigRecord

    return [EigRecord(int(r["k"]), float(r["f1_macro"]), int(r["memory_bytes"]),
                      float(r["f1_retention_pct"]), float(r["memory_savings_pct"]))
            for r in read_rows(path, ["k", "f1_macro", "memory_bytes", "f1_retention_pct",
                                      "memory_savings_pct"])]


# ---------------------------------------------------------------------------
# summary


def _maybe(fn, xs, ys):
    try:
        return fn(xs, ys)
    except (ZeroVariance, ValueError):
        return None


def correlations(points: Sequence[MatrixPoint]) -> dict:
    shares = [p.dominant_share for p in points]
    eers = [p.eer for p in points]
    if len(points) < 2:
        return {"n": len(points), "pearson": None, "spearman": None}
    return {"n": len(points), "pearson": _maybe(pearson, shares, eers),
            "spearman": _maybe(spearman, shares, eers)}


def summary_dict(result) -> dict:
    from .pipeline import finite_or_none, train_accuracy

    cfg = result.config
    points = matrix_points(result.records)
    return {
        "format_version": 1,
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("out", "jobs")},
        "n_samples": len(result.table.sample_ids),
        "classes": list(result.model.classes),
        "feature_count": result.model.feature_count,
        "trees": len(result.model.trees),
        "train_accuracy": train_accuracy(result.model, result.table),
        "final_train_loss": result.model.loss_history[-1] if result.model.loss_history else None,
        "records": [
            {
                "attack": r.attack,
                "n": r.n,
                "eer": r.eer,
                "eer_ci": r.eer_ci,
                "dominant_block": r.dominant_block,
                "dominant_share": r.dominant_share,
                "dominant_score": r.dominant_score,
                "archetype": r.archetype.value,
                "blocks": list(r.blocks),
                "phi": list(r.phi),
                "phi_ci": list(r.phi_ci),
                "shares": list(r.shares),
                "share_ci": list(r.share_ci),
                "scores": {p.value: list(v) for p, v in r.scores.items()},
            }
            for r in result.records
        ],
        "archetype_groups": [g.__dict__ for g in group_stats(
            [(p.label.value, p.dominant_share) for p in points])] if points else [],
        "correlation_share_vs_eer": correlations(points),
        "penalty_tau_vs_linear": {p.value: finite_or_none(t)
                                  for p, t in result.penalty.tau.items()},
    }


def write_run(result, out: str | os.PathLike) -> None:
    out = Path(out)
    write_features(out / FEATURES, result.table)
    write_model(out / MODEL, result.model)
    write_own_shap(out / SHAP, result.table, result.model, result.phi_own, result.base_own)
    write_aggregates(out, result.records)
    write_penalty_ablation(out / PENALTY_CSV, result.penalty)
    write_json(out / SUMMARY, summary_dict(result))


def write_aggregates(out: str | os.PathLike, records) -> None:
    out = Path(out)
    write_table3(out / TABLE3, records)
    write_table4(out / TABLE4, records)
    if records:
        write_table1(out / TABLE1, records)
        write_table2(out / TABLE2, records)
        emit_strategy_matrix(records, out / MATRIX_SVG, out / MATRIX_CSV)
