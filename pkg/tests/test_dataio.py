import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchscope.dataio import (
    HEADER,
    MAGIC,
    ActivationMatrix,
    ComponentId,
    ComponentSpec,
    CovarianceAxis,
    Layout,
    SampleRecord,
    canonical_layout,
    decode_tensor,
    encode_tensor,
    load_manifest,
    manifest_dict,
    read_activation,
    read_scores_csv,
    write_activation,
    write_manifest,
)
from branchscope.errors import (
    CorruptHeader,
    DanglingTensorRef,
    DuplicateComponent,
    DuplicateSampleId,
    MissingFile,
    NonFiniteValue,
    NotFound,
    SchemaViolation,
)

B0H1 = ComponentId("B0", "HSGAL1")


def small_layout():
    return Layout((ComponentSpec(B0H1), ComponentSpec(ComponentId("G", "GLOBAL"))), ("B0", "G"))


def build(tmp_path, layout, samples, shape=(3, 5), rng=None):
    rng = rng or np.random.default_rng(0)
    refs = []
    for s in samples:
        for c in layout.components:
            rel = f"{s.sample_id}_{c.block}_{c.role}.bin"
            write_activation(tmp_path / rel, ActivationMatrix(c, rng.normal(size=shape)))
            refs.append((s.sample_id, c, rel, 0))
    path = tmp_path / "manifest.json"
    write_manifest(path, layout, samples, refs)
    return path


def test_canonical_layout_has_14_components():
    lay = canonical_layout()
    assert len(lay.components) == 14
    assert lay.blocks == ("B0", "B1", "B2", "B3", "GAT_S", "GAT_T")
    assert [len(lay.block_components(b)) for b in lay.blocks] == [3, 3, 3, 3, 1, 1]
    assert str(lay.components[0]) == "B0:HSGAL1"


def test_canonical_manifest_two_samples_has_28_refs(tmp_path):
    samples = [SampleRecord("s1", "A01"), SampleRecord("s2", "A02")]
    man = load_manifest(build(tmp_path, canonical_layout(), samples))
    assert len(man.tensor_index) == 28
    assert man.layout.components == canonical_layout().components


def test_duplicate_component_rejected(tmp_path):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A")])
    data = json.loads(path.read_text())
    data["layout"]["components"].append(dict(data["layout"]["components"][0]))
    path.write_text(json.dumps(data))
    with pytest.raises(DuplicateComponent):
        load_manifest(path)


def test_header_dims_disagreeing_with_layout(tmp_path):
    lay = Layout((ComponentSpec(B0H1, rows=32),), ("B0",))
    path = build(tmp_path, lay, [SampleRecord("s1", "A")], shape=(64, 4))
    with pytest.raises(SchemaViolation):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "nope.json")


def test_dangling_tensor_ref(tmp_path):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A")])
    (tmp_path / "s1_B0_HSGAL1.bin").unlink()
    with pytest.raises(DanglingTensorRef):
        load_manifest(path)


def test_duplicate_sample_id(tmp_path):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A")])
    data = json.loads(path.read_text())
    data["samples"].append(dict(data["samples"][0]))
    path.write_text(json.dumps(data))
    with pytest.raises(DuplicateSampleId):
        load_manifest(path)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("layout"),
    lambda d: d.update(format_version=2),
    lambda d: d["samples"][0].update(class_label=""),
    lambda d: d["samples"][0].update(detector_score="high"),
    lambda d: d["tensors"].pop(),
    lambda d: d["tensors"][0].update(component="B0-HSGAL1"),
    lambda d: d["tensors"][0].update(sample="ghost"),
    lambda d: d["tensors"][0].update(offset=-1),
    lambda d: d["layout"]["components"][0].update(axis="SIDEWAYS"),
])
def test_schema_violations_are_typed(tmp_path, mutate):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A"), SampleRecord("s2", "B")])
    data = json.loads(path.read_text())
    mutate(data)
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaViolation):
        load_manifest(path)


def test_invalid_json(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(SchemaViolation):
        load_manifest(path)


def test_round_trip_3x5(tmp_path):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A")])
    man = load_manifest(path)
    m = np.arange(15, dtype=float).reshape(3, 5) / 7
    write_activation(tmp_path / "s1_B0_HSGAL1.bin", ActivationMatrix(B0H1, m))
    assert np.array_equal(read_activation(man, "s1", B0H1).values, m)


def test_unknown_component_not_found(tmp_path):
    man = load_manifest(build(tmp_path, small_layout(), [SampleRecord("s1", "A")]))
    with pytest.raises(NotFound):
        read_activation(man, "s1", ComponentId("B9", "POOL"))


def test_truncated_payload(tmp_path):
    path = build(tmp_path, small_layout(), [SampleRecord("s1", "A")])
    man = load_manifest(path)
    f = tmp_path / "s1_B0_HSGAL1.bin"
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(CorruptHeader):
        read_activation(man, "s1", B0H1)
    with pytest.raises(CorruptHeader):
        load_manifest(path)


def test_bad_magic():
    blob = bytearray(encode_tensor(np.ones((2, 2))))
    blob[0:1] = b"X"
    with pytest.raises(CorruptHeader):
        decode_tensor(bytes(blob))


def test_one_by_one(tmp_path):
    write_activation(tmp_path / "a.bin", ActivationMatrix(B0H1, [[7.0]]))
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == MAGIC and len(raw) == HEADER.size + 8
    assert decode_tensor(raw).tolist() == [[7.0]]


def test_byte_layout_is_little_endian_row_major():
    raw = encode_tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert int.from_bytes(raw[8:16], "little") == 3
    assert int.from_bytes(raw[16:24], "little") == 2
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1, 2, 3, 4, 5, 6]


def test_non_finite_rejected(tmp_path):
    with pytest.raises(NonFiniteValue):
        ActivationMatrix(B0H1, [[1.0, np.nan]])
    with pytest.raises(NonFiniteValue):
        encode_tensor(np.array([[np.inf]]))


def test_same_matrix_written_twice_identical(tmp_path):
    m = ActivationMatrix(B0H1, np.random.default_rng(3).normal(size=(4, 6)))
    write_activation(tmp_path / "a.bin", m)
    write_activation(tmp_path / "b.bin", m)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(d, n, seed):
    m = np.random.default_rng(seed).normal(size=(d, n)) * 10.0 ** np.random.default_rng(seed).integers(-5, 5)
    assert np.array_equal(decode_tensor(encode_tensor(m)), m)


def test_packed_offsets_and_stable_order(tmp_path):
    lay = small_layout()
    rng = np.random.default_rng(1)
    mats = {c: rng.normal(size=(2, 3)) for c in lay.components}
    blob = b"".join(encode_tensor(mats[c]) for c in lay.components)
    (tmp_path / "packed.bin").write_bytes(blob)
    step = len(blob) // 2
    refs = [("s1", c, "packed.bin", i * step) for i, c in enumerate(lay.components)]
    write_manifest(tmp_path / "m.json", lay, [SampleRecord("s1", "A", 0.5)], refs)
    a = load_manifest(tmp_path / "m.json")
    b = load_manifest(tmp_path / "m.json")
    assert a.layout.components == b.layout.components == lay.components
    for c in lay.components:
        assert np.array_equal(a.read("s1", c), mats[c])
    assert a.sample("s1").detector_score == 0.5


def test_cross_sample_axis_round_trips():
    lay = canonical_layout(rows=8, cols=12, pool_axis=CovarianceAxis.CROSS_SAMPLE)
    pool = lay.spec(ComponentId("B0", "POOL"))
    assert pool.axis is CovarianceAxis.CROSS_SAMPLE and pool.cols is None
    assert Layout.from_dict(lay.to_dict()) == lay


def test_manifest_dict_fields():
    d = manifest_dict(small_layout(), [SampleRecord("s1", "A")], [("s1", B0H1, "x.bin", 0)])
    assert set(d) == {"format_version", "layout", "samples", "tensors"}
    assert d["tensors"][0] == {"sample": "s1", "component": "B0:HSGAL1", "path": "x.bin", "offset": 0}


def test_sample_record_invariants():
    with pytest.raises(SchemaViolation):
        SampleRecord("", "A")
    with pytest.raises(SchemaViolation):
        SampleRecord("s", "")


def test_scores_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("sample_id,label,score\na,bonafide,0.1\nb,A01,2.5\n")
    assert read_scores_csv(p) == {"a": ("bonafide", 0.1), "b": ("A01", 2.5)}
    p.write_text("sample_id,score\na,1\n")
    with pytest.raises(SchemaViolation):
        read_scores_csv(p)
    p.write_text("sample_id,label,score\na,x,1\na,x,2\n")
    with pytest.raises(DuplicateSampleId):
        read_scores_csv(p)
