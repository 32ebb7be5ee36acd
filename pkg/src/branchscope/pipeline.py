"""The end-to-end analysis: spectra, meta-classifier, attributions, strategies.

Each stage is a plain function over in-memory values so the CLI can run them
one at a time (persisting intermediates) or all together.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .attribution import (
    ALL_PENALTIES,
    AttributionReport,
    Penalty,
    SigmaMode,
    attack_report,
    block_ranks,
    component_matrix,
    kendall_tau,
    z_value,
)
from .dataio import ComponentId, DatasetManifest, Layout, SampleRecord, load_manifest, read_scores_csv
from .errors import ConfigError, ConfigInvalid, DataError, SchemaViolation
from .evaluation import (
    ArchetypeLabel,
    ArchetypeThresholds,
    ScoreSet,
    classify_archetype,
    eer,
    f1_macro,
)
from .gbdt import TrainConfig, TreeEnsemble, fit
from .spectral import feature_names, spectra_batch, truncate_spectra
from .synth import BONAFIDE
from .treeshap import shap_batch

SHAP_CHUNK = 64
DEFAULT_ABLATION_KS = (2, 5, 10, 20, 35)


class MissingScores(DataError):
    module = "cli"


class ActivationSource(Protocol):
    layout: Layout
    samples: Sequence[SampleRecord]

    def stack(self, component: ComponentId): ...


class ManifestSource:
    """Adapter reading every sample's tensor for a component from disk."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.layout = manifest.layout
        self.samples = manifest.samples

    def stack(self, component: ComponentId) -> list[np.ndarray]:
        return [self.manifest.read(s.sample_id, component) for s in self.samples]


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str | None = None
    k: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    penalties: tuple[Penalty, ...] = ALL_PENALTIES
    thresholds: ArchetypeThresholds = field(default_factory=ArchetypeThresholds)
    alpha: float = 0.05
    out: str | None = None
    seed: int = 0
    jobs: int = 1
    scores: str | None = None
    use_model_scores: bool = False
    ablation_ks: tuple[int, ...] = DEFAULT_ABLATION_KS
    sigma_mode: SigmaMode = SigmaMode.POPULATION
    bootstrap_rounds: int = 200
    bonafide_label: str = BONAFIDE

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigInvalid("k must be an integer >= 1")
        if self.jobs < 1:
            raise ConfigInvalid("jobs must be >= 1")
        if self.bootstrap_rounds < 2:
            raise ConfigInvalid("bootstrap_rounds must be >= 2")
        if not self.ablation_ks or any((not isinstance(k, int)) or k < 1 for k in self.ablation_ks):
            raise ConfigInvalid("ablation_ks must be a non-empty list of integers >= 1")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigInvalid("seed must be a non-negative integer")
        try:
            z_value(self.alpha)
            object.__setattr__(self, "penalties", tuple(Penalty(p) for p in self.penalties))
            object.__setattr__(self, "sigma_mode", SigmaMode(self.sigma_mode))
        except (ValueError, ConfigError, DataError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        if not self.penalties:
            raise ConfigInvalid("penalties must not be empty")

    @property
    def train_config(self) -> TrainConfig:
        # --jobs bounds every worker pool; results never depend on it
        return replace(self.train, seed=self.seed, worker_parallelism=self.jobs)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "dataset": self.dataset,
            "k": self.k,
            "train": {f: getattr(t, f) for f in t.__dataclass_fields__},
            "penalties": [p.value for p in self.penalties],
            "thresholds": {"eer_low": self.thresholds.eer_low, "eer_high": self.thresholds.eer_high,
                           "share": self.thresholds.share},
            "alpha": self.alpha,
            "out": self.out,
            "seed": self.seed,
            "jobs": self.jobs,
            "scores": self.scores,
            "use_model_scores": self.use_model_scores,
            "ablation_ks": list(self.ablation_ks),
            "sigma_mode": self.sigma_mode.value,
            "bootstrap_rounds": self.bootstrap_rounds,
            "bonafide_label": self.bonafide_label,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        if not isinstance(data, Mapping):
            raise ConfigInvalid("configuration must be a JSON object")
        d = dict(data)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown configuration keys {sorted(unknown)}")
        try:
            if "train" in d:
                d["train"] = TrainConfig.from_dict(dict(d["train"]))
            if "thresholds" in d:
                d["thresholds"] = ArchetypeThresholds(**dict(d["thresholds"]))
            for key in ("penalties", "ablation_ks"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, DataError) as exc:
            raise ConfigInvalid(f"bad configuration: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigInvalid(f"cannot read configuration {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(data)
        # a relative dataset path is taken relative to the configuration file
        if cfg.dataset and not Path(cfg.dataset).is_absolute():
            cfg = replace(cfg, dataset=str(Path(path).parent / cfg.dataset))
        return cfg


def open_source(config: PipelineConfig) -> ActivationSource:
    if not config.dataset:
        raise ConfigInvalid("no dataset given")
    return ManifestSource(load_manifest(config.dataset))


# ---------------------------------------------------------------------------
# phase 1


@dataclass(frozen=True, eq=False)
class FeatureTable:
    sample_ids: tuple[str, ...]
    labels: tuple[str, ...]
    X: np.ndarray
    names: tuple[str, ...]
    detector_scores: tuple[float | None, ...]


def _spectra_of(mats, jobs: int) -> np.ndarray:
    if isinstance(mats, np.ndarray):
        return spectra_batch(mats, jobs)
    shapes = {}
    for i, m in enumerate(mats):
        shapes.setdefault(np.shape(m), []).append(i)
    rows = {s[0] for s in shapes}
    if len(rows) != 1:
        raise SchemaViolation(f"component matrices disagree on D: {sorted(rows)}")
    out = np.empty((len(mats), rows.pop()))
    for shape, idx in shapes.items():
        out[idx] = spectra_batch(np.stack([mats[i] for i in idx]), jobs)
    return out


def component_spectra(source: ActivationSource, jobs: int = 1) -> list[np.ndarray]:
    """Full descending spectrum of every (sample, component), one (n, D) array per component."""
    return [_spectra_of(source.stack(c), jobs) for c in source.layout.components]


def feature_table(source: ActivationSource, spectra: list[np.ndarray], k: int) -> FeatureTable:
    X = np.concatenate([truncate_spectra(s, k) for s in spectra], axis=1)
    samples = source.samples
    return FeatureTable(tuple(s.sample_id for s in samples), tuple(s.class_label for s in samples),
                        X, feature_names(source.layout, k),
                        tuple(s.detector_score for s in samples))


def extract(source: ActivationSource, config: PipelineConfig) -> FeatureTable:
    return feature_table(source, component_spectra(source, config.jobs), config.k)


# ---------------------------------------------------------------------------
# phases 2 and 3


def train(table: FeatureTable, config: PipelineConfig) -> TreeEnsemble:
    return fit(table.X, list(table.labels), config.train_config)


def own_class_shap(model: TreeEnsemble, table: FeatureTable, jobs: int = 1):
    """Attributions of every sample toward its own class: (phi (n, F), base (n,))."""
    cls = np.array([model.classes.index(l) for l in table.labels], dtype=np.intp)
    chunks = [slice(i, i + SHAP_CHUNK) for i in range(0, len(table.X), SHAP_CHUNK)]

    def work(sl):
        phi, base = shap_batch(model, table.X[sl])
        c = cls[sl]
        return phi[np.arange(len(c)), :, c], base[c]

    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    if not parts:
        return np.zeros((0, model.feature_count)), np.zeros(0)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def attack_classes(classes: Sequence[str], config: PipelineConfig) -> list[str]:
    return [c for c in classes if c != config.bonafide_label]


def _sub_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def aggregate(phi_own: np.ndarray, table: FeatureTable, layout: Layout, classes: Sequence[str],
              config: PipelineConfig) -> dict[str, AttributionReport]:
    comp = component_matrix(phi_own, len(layout.components), config.k)
    labels = np.array(table.labels)
    reports = {}
    for i, attack in enumerate(attack_classes(classes, config)):
        rows = comp[labels == attack]
        reports[attack] = attack_report(rows, layout, attack, config.penalties, config.alpha,
                                        config.sigma_mode, _sub_seed(config.seed, 0, i),
                                        config.bootstrap_rounds)
    return reports


# ---------------------------------------------------------------------------
# error rates and strategy records


def resolve_scores(table: FeatureTable, config: PipelineConfig,
                   model: TreeEnsemble | None = None) -> np.ndarray:
    """Per-sample detector scores: score file, then manifest fields, then (opt-in) the model."""
    if config.scores:
        external = read_scores_csv(config.scores)
        missing = [s for s in table.sample_ids if s not in external]
        if missing:
            raise MissingScores(f"score file lacks {len(missing)} samples, e.g. {missing[0]!r}")
        return np.array([external[s][1] for s in table.sample_ids])
    if all(s is not None for s in table.detector_scores):
        return np.array(table.detector_scores, dtype=np.float64)
    if config.use_model_scores and model is not None:
        if config.bonafide_label not in model.classes:
            raise MissingScores("model scores need a bona fide class")
        p = model.predict_proba(table.X)
        return 1.0 - p[:, model.classes.index(config.bonafide_label)]
    raise MissingScores("no detector scores: pass a score file, fill detector_score, "
                        "or enable use_model_scores")


def eer_with_ci(bona: np.ndarray, spoof: np.ndarray, alpha: float, rounds: int,
                seed: int) -> tuple[float, float]:
    point = eer(ScoreSet(bona, spoof)).eer
    rng = np.random.default_rng(seed)
    boot = np.array([eer(ScoreSet(bona[rng.integers(0, len(bona), len(bona))],
                                  spoof[rng.integers(0, len(spoof), len(spoof))])).eer
                     for _ in range(rounds)])
    return point, z_value(alpha) * float(boot.std(ddof=1))


@dataclass(frozen=True, eq=False)
class StrategyRecord:
    attack: str
    n: int
    eer: float
    eer_ci: float
    blocks: tuple[str, ...]
    phi: tuple[float, ...]
    phi_ci: tuple[float, ...]
    scores: Mapping[Penalty, tuple[float, ...]]
    shares: tuple[float, ...]
    share_ci: tuple[float, ...]
    dominant_block: str
    dominant_share: float
    dominant_score: float
    archetype: ArchetypeLabel


def strategy_records(reports: Mapping[str, AttributionReport], table: FeatureTable,
                     scores: np.ndarray, config: PipelineConfig) -> list[StrategyRecord]:
    labels = np.array(table.labels)
    bona = scores[labels == config.bonafide_label]
    if len(bona) == 0:
        raise MissingScores(f"no samples labelled {config.bonafide_label!r} to compute EER")
    out = []
    for i, (attack, rep) in enumerate(reports.items()):
        e, e_ci = eer_with_ci(bona, scores[labels == attack], config.alpha,
                              config.bootstrap_rounds, _sub_seed(config.seed, 1, i))
        sv = rep.shares[Penalty.LINEAR]
        d = sv.dominant_index
        linear = rep.score_values(Penalty.LINEAR)
        out.append(StrategyRecord(
            attack=attack, n=rep.n, eer=e, eer_ci=e_ci, blocks=rep.blocks,
            phi=tuple(b.phi_sum for b in rep.branches),
            phi_ci=tuple(b.ci_half_width for b in rep.branches),
            scores={p: tuple(float(v) for v in rep.score_values(p)) for p in rep.scores},
            shares=tuple(float(s) for s in sv.shares),
            share_ci=tuple(float(c) for c in rep.share_ci[Penalty.LINEAR]),
            dominant_block=sv.dominant_block, dominant_share=sv.dominant_share,
            dominant_score=float(linear[d]),
            archetype=classify_archetype(100 * e, 100 * sv.dominant_share, config.thresholds),
        ))
    return out


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class PenaltyAblation:
    attacks: tuple[str, ...]
    penalties: tuple[Penalty, ...]
    dominant: Mapping[str, Mapping[Penalty, str]]
    tau: Mapping[Penalty, float]


def penalty_ablation(reports: Mapping[str, AttributionReport],
                     penalties: Sequence[Penalty] = ALL_PENALTIES) -> PenaltyAblation:
    penalties = tuple(Penalty(p) for p in penalties)
    if Penalty.LINEAR not in penalties:
        penalties = (Penalty.LINEAR,) + penalties
    attacks = tuple(reports)
    dominant = {a: {p: reports[a].shares[p].dominant_block for p in penalties} for a in attacks}
    ranks = {p: np.concatenate([block_ranks(reports[a].score_values(p)) for a in attacks])
             for p in penalties}
    tau = {}
    for p in penalties:
        tau[p] = kendall_tau(ranks[p], ranks[Penalty.LINEAR]) if len(ranks[p]) >= 2 else float("nan")
    return PenaltyAblation(attacks, penalties, dominant, tau)


@dataclass(frozen=True)
class EigRecord:
    k: int
    f1_macro: float
    memory_bytes: int
    f1_retention_pct: float
    memory_savings_pct: float


def stratified_split(labels: Sequence[str], seed: int, test_fraction: float = 0.2):
    """Deterministic per-class split; every class with >= 2 samples lands in both parts."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return np.sort(np.array(train_idx, dtype=np.intp)), np.sort(np.array(test_idx, dtype=np.intp))


def memory_bytes(n_samples: int, n_components: int, k: int) -> int:
    return n_samples * n_components * k * 8


def ablate_eigencount(config: PipelineConfig, ks: Sequence[int] | None = None,
                      source: ActivationSource | None = None,
                      spectra: list[np.ndarray] | None = None) -> list[EigRecord]:
    ks = tuple(ks if ks is not None else config.ablation_ks)
    if not ks or any(k < 1 for k in ks):
        raise ConfigInvalid("ks must be a non-empty list of integers >= 1")
    source = source if source is not None else open_source(config)
    if spectra is None:
        spectra = component_spectra(source, config.jobs)
    labels = [s.class_label for s in source.samples]
    train_idx, test_idx = stratified_split(labels, config.seed)
    if len(test_idx) == 0:
        raise DataError("not enough samples for a held-out split", module="cli")
    n, C = len(labels), len(source.layout.components)
    f1s = []
    for k in ks:
        X = np.concatenate([truncate_spectra(s, k) for s in spectra], axis=1)
        model = fit(X[train_idx], [labels[i] for i in train_idx], config.train_config)
        f1s.append(f1_macro(model.predict(X[test_idx]), [labels[i] for i in test_idx]))
    best = max(f1s)
    kmax = max(ks)
    return [EigRecord(k, f, memory_bytes(n, C, k), 100.0 * f / best if best > 0 else 0.0,
                      100.0 * (1.0 - k / kmax))
            for k, f in zip(ks, f1s)]


# ---------------------------------------------------------------------------
# whole pipeline


@dataclass(frozen=True, eq=False)
class PipelineResult:
    config: PipelineConfig
    layout: Layout
    table: FeatureTable
    model: TreeEnsemble
    phi_own: np.ndarray
    base_own: np.ndarray
    reports: Mapping[str, AttributionReport]
    records: list[StrategyRecord]
    penalty: PenaltyAblation


def run_pipeline(config: PipelineConfig, source: ActivationSource | None = None,
                 write: bool = True) -> PipelineResult:
    source = source if source is not None else open_source(config)
    table = extract(source, config)
    model = train(table, config)
    phi, base = own_class_shap(model, table, config.jobs)
    reports = aggregate(phi, table, source.layout, model.classes, config)
    scores = resolve_scores(table, config, model)
    records = strategy_records(reports, table, scores, config)
    result = PipelineResult(config, source.layout, table, model, phi, base, reports, records,
                            penalty_ablation(reports, config.penalties))
    if write and config.out:
        from .reports import write_run
        write_run(result, config.out)
    return result


def train_accuracy(model: TreeEnsemble, table: FeatureTable) -> float:
    pred = model.predict(table.X)
    return float(np.mean([p == l for p, l in zip(pred, table.labels)]))


def finite_or_none(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None
