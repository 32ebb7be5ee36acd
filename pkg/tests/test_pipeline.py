import numpy as np
import pytest

from branchscope import reports
from branchscope.attribution import ALL_PENALTIES, Penalty, attack_report
from branchscope.dataio import SampleRecord, canonical_layout
from branchscope.errors import ConfigInvalid, SingleClassDataset
from branchscope.evaluation import ArchetypeLabel
from branchscope.gbdt import TrainConfig
from branchscope.pipeline import (
    FeatureTable,
    MissingScores,
    PipelineConfig,
    ablate_eigencount,
    memory_bytes,
    penalty_ablation,
    resolve_scores,
    run_pipeline,
    stratified_split,
)
from branchscope.reference import PUBLISHED_ROWS
from branchscope.synth import SynthDataset, expert_config, generate

TRAIN = TrainConfig(iterations=25, depth=4, bins=16, learning_rate=0.3)


def small_config(**kw):
    base = dict(k=4, train=TRAIN, bootstrap_rounds=20, ablation_ks=(2, 4))
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return generate(expert_config(D=8, N=16, samples_per_class=40, seed=2))


@pytest.fixture(scope="module")
def result(dataset):
    return run_pipeline(small_config(), dataset, write=False)


def test_planted_experts_dominate(result):
    got = {r.attack: r.dominant_block for r in result.records}
    for b in ("B0", "B1", "B2", "B3"):
        assert got[f"X{int(b[1])}_{b}"] == b


def test_record_invariants(result):
    assert [r.attack for r in result.records] == ["CONS0", "X0_B0", "X1_B1", "X2_B2", "X3_B3"]
    for r in result.records:
        assert abs(sum(r.shares) - 1) <= 1e-12
        assert r.dominant_block == r.blocks[int(np.argmax(r.shares))]
        assert r.dominant_share == max(r.shares)
        assert set(r.scores) == set(ALL_PENALTIES)
        assert 0 <= r.eer <= 1 and r.eer_ci >= 0
        assert isinstance(r.archetype, ArchetypeLabel)


def test_single_class_propagates(dataset):
    idx = [i for i, s in enumerate(dataset.samples) if s.class_label == "X0_B0"]
    one = SynthDataset(dataset.layout, tuple(dataset.samples[i] for i in idx),
                       {c: a[idx] for c, a in dataset.activations.items()})
    with pytest.raises(SingleClassDataset) as info:
        run_pipeline(small_config(), one, write=False)
    assert str(info.value).startswith("[gbdt] SingleClassDataset")


def test_deterministic_reports(tmp_path, dataset):
    run_pipeline(small_config(out=str(tmp_path / "a")), dataset)
    run_pipeline(small_config(out=str(tmp_path / "b"), jobs=3), dataset)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert reports.TABLE1 in names and reports.SUMMARY in names and reports.MATRIX_SVG in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_eig_ablation_memory_model(dataset):
    recs = ablate_eigencount(small_config(), [2, 4, 8], source=dataset)
    assert [r.memory_bytes for r in recs] == [memory_bytes(len(dataset.samples), 14, k) for k in (2, 4, 8)]
    assert recs[2].memory_bytes / recs[0].memory_bytes == 4
    assert max(r.f1_retention_pct for r in recs) == 100.0
    assert recs[-1].memory_savings_pct == 0.0
    (single,) = ablate_eigencount(small_config(), [5], source=dataset)
    assert (single.f1_retention_pct, single.memory_savings_pct) == (100.0, 0.0)
    with pytest.raises(ConfigInvalid):
        ablate_eigencount(small_config(), [], source=dataset)
    with pytest.raises(ConfigInvalid):
        ablate_eigencount(small_config(), [0], source=dataset)


def test_savings_10_vs_35():
    assert 100 * (1 - 10 / 35) == pytest.approx(71.4, abs=0.05)
    assert memory_bytes(100, 14, 35) / memory_bytes(100, 14, 10) == 3.5


def test_stratified_split_deterministic():
    labels = ["a"] * 10 + ["b"] * 5 + ["c"]
    tr, te = stratified_split(labels, 7)
    tr2, te2 = stratified_split(labels, 7)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    assert sorted(np.r_[tr, te].tolist()) == list(range(16))
    assert sum(labels[i] == "a" for i in te) == 2 and sum(labels[i] == "b" for i in te) == 1


def _report(means, attack="A"):
    return attack_report(np.tile(means, (3, 1)), canonical_layout(), attack, bootstrap_rounds=5)


def test_penalty_ablation_collapse():
    flat = np.repeat([0.1, 0.3, 0.2, 0.0, 0.5, 0.05], [3, 3, 3, 3, 1, 1])
    abl = penalty_ablation({"A": _report(flat), "B": _report(flat[::-1])})
    assert all(len(set(d.values())) == 1 for d in abl.dominant.values())
    assert all(t == 1.0 for t in abl.tau.values())


def test_penalty_ablation_constructed_conflict():
    means = np.r_[[0.9, 0.9, -0.3], [0.4, 0.4, 0.4], np.zeros(8)]
    abl = penalty_ablation({"C": _report(means)})
    d = abl.dominant["C"]
    assert d[Penalty.LINEAR] == d[Penalty.QUADRATIC] == d[Penalty.EXPONENTIAL] == "B1"
    assert d[Penalty.NONE] == "B0"
    assert abl.tau[Penalty.LINEAR] == 1.0


def _table(scores, labels=("bonafide", "A")):
    return FeatureTable(("s1", "s2"), labels, np.zeros((2, 1)), ("f",), scores)


def test_score_precedence(tmp_path):
    cfg = PipelineConfig()
    assert resolve_scores(_table((0.1, 0.9)), cfg).tolist() == [0.1, 0.9]
    p = tmp_path / "scores.csv"
    p.write_text("sample_id,label,score\ns1,bonafide,5\ns2,A,6\n")
    assert resolve_scores(_table((0.1, 0.9)), PipelineConfig(scores=str(p))).tolist() == [5, 6]
    with pytest.raises(MissingScores):
        resolve_scores(_table((None, 0.9)), cfg)
    p.write_text("sample_id,label,score\ns1,bonafide,5\n")
    with pytest.raises(MissingScores):
        resolve_scores(_table((0.1, 0.9)), PipelineConfig(scores=str(p)))


def test_model_scores_fallback(dataset):
    samples = tuple(SampleRecord(s.sample_id, s.class_label) for s in dataset.samples)
    bare = SynthDataset(dataset.layout, samples, dataset.activations)
    with pytest.raises(MissingScores):
        run_pipeline(small_config(), bare, write=False)
    res = run_pipeline(small_config(use_model_scores=True), bare, write=False)
    assert all(r.eer < 0.2 for r in res.records)


def test_config_validation(tmp_path):
    for bad in ({"k": 0}, {"thresholds": {"eer_low": 5, "eer_high": 1}}, {"colour": 1},
                {"alpha": 0.2}, {"penalties": ["CUBIC"]}, {"train": {"depth": 0}}, {"jobs": 0}):
        with pytest.raises(ConfigInvalid):
            PipelineConfig.from_dict(bad)
    cfg = PipelineConfig.from_dict(small_config().to_dict())
    assert cfg.to_dict() == small_config().to_dict()
    p = tmp_path / "sub" / "cfg.json"
    p.parent.mkdir()
    p.write_text('{"dataset": "data/manifest.json"}')
    assert PipelineConfig.load(p).dataset == str(tmp_path / "sub" / "data" / "manifest.json")


def test_strategy_matrix_outputs(tmp_path):
    pts = [reports.MatrixPoint(r.attack, r.eer, r.shares[0], r.label) for r in PUBLISHED_ROWS]
    reports.emit_strategy_matrix(pts, tmp_path / "m.svg", tmp_path / "m.csv")
    svg = (tmp_path / "m.svg").read_text()
    assert svg.count('class="point"') == 13
    assert svg.count('class="guide-share"') == 1 and svg.count('class="guide-eer"') == 2
    back = reports.read_strategy_csv(tmp_path / "m.csv")
    assert back == pts
    # A19 sits at 0.97% EER with a 20.09% share, so four rows land in the lower-right quadrant
    low = sorted(p.attack for p in back if p.eer < 1 and p.dominant_share >= 20)
    assert low == ["A07", "A09", "A14", "A19"]


def test_strategy_matrix_single_point(tmp_path):
    reports.emit_strategy_matrix([reports.MatrixPoint("A", 3.0, 25.0, ArchetypeLabel.INEFFECTIVE_SPECIALIZATION)],
                                 tmp_path / "m.svg")
    svg = (tmp_path / "m.svg").read_text()
    assert svg.count('class="point"') == 1 and 'guide-share' in svg and 'guide-eer' in svg
    assert len(reports.read_strategy_csv(tmp_path / "m.csv")) == 1


def test_every_csv_round_trips(tmp_path, dataset, result):
    out = tmp_path
    reports.write_run(result, out)
    t1 = reports.read_table1(out / reports.TABLE1)
    assert [r.attack for r in t1] == [r.attack for r in result.records]
    assert t1[0].dominant_share_pct == 100 * result.records[0].dominant_share
    t3 = reports.read_table3(out / reports.TABLE3)
    assert len(t3) == 6 * len(result.records)
    assert t3[0]["phi"] == result.records[0].phi[0]
    assert t3[0][Penalty.NONE] == result.records[0].scores[Penalty.NONE][0]
    t4 = reports.read_table4(out / reports.TABLE4)
    assert sum(r["share_pct"] for r in t4 if r["attack"] == "CONS0") == pytest.approx(100)
    t2 = reports.read_table2(out / reports.TABLE2)
    assert sum(g["count"] for g in t2) == len(result.records)
    pen = reports.read_penalty_ablation(out / reports.PENALTY_CSV)
    assert pen.dominant == result.penalty.dominant and pen.tau == result.penalty.tau
    feats = reports.read_features(out / reports.FEATURES)
    assert np.array_equal(feats.X, result.table.X) and feats.labels == result.table.labels
    assert feats.detector_scores == result.table.detector_scores
    model = reports.read_model(out / reports.MODEL)
    assert model.to_json() == result.model.to_json()
    eig = ablate_eigencount(small_config(), [2, 4], source=dataset)
    reports.write_eig_ablation(out / reports.EIG_CSV, eig)
    assert reports.read_eig_ablation(out / reports.EIG_CSV) == eig
