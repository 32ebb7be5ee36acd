"""Dataset contract: JSON manifest plus little-endian binary activation tensors.

Tensor file layout (one record; several records may be packed in one file at
distinct byte offsets)::

    bytes 0-7    magic b"BLNS0001"
    bytes 8-15   D (rows), uint64 little-endian
    bytes 16-23  N (cols), uint64 little-endian
    bytes 24-    D*N float64 little-endian, row-major
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CorruptHeader,
    DanglingTensorRef,
    DuplicateComponent,
    DuplicateSampleId,
    IoFailure,
    MissingFile,
    NonFiniteValue,
    NotFound,
    SchemaViolation,
)

MAGIC = b"BLNS0001"
HEADER = struct.Struct("<8sQQ")
FORMAT_VERSION = 1

HSGAL1 = "HSGAL1"
HSGAL2 = "HSGAL2"
POOL = "POOL"
GLOBAL = "GLOBAL"
BRANCH_ROLES = (HSGAL1, HSGAL2, POOL)
CANONICAL_BRANCHES = ("B0", "B1", "B2", "B3")
CANONICAL_GLOBALS = ("GAT_S", "GAT_T")


class CovarianceAxis(str, Enum):
    TEMPORAL = "TEMPORAL"
    CROSS_SAMPLE = "CROSS_SAMPLE"


@dataclass(frozen=True)
class ComponentId:
    block: str
    role: str

    def __str__(self):
        return f"{self.block}:{self.role}"

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        block, sep, role = str(text).partition(":")
        if not sep or not block or not role:
            raise SchemaViolation(f"component id {text!r} is not of the form BLOCK:ROLE")
        return cls(block, role)


@dataclass(frozen=True)
class ComponentSpec:
    """Per-component layout entry: identity, covariance axis and declared dims."""

    id: ComponentId
    axis: CovarianceAxis = CovarianceAxis.TEMPORAL
    rows: int | None = None
    cols: int | None = None


@dataclass(frozen=True)
class Layout:
    specs: tuple[ComponentSpec, ...]
    blocks: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        for spec in self.specs:
            if spec.id in seen:
                raise DuplicateComponent(f"component {spec.id} listed twice")
            seen.add(spec.id)
            if spec.id.block not in self.blocks:
                raise SchemaViolation(f"component {spec.id} belongs to unknown block {spec.id.block!r}")
        if len(set(self.blocks)) != len(self.blocks):
            raise SchemaViolation("duplicate block label in layout")
        if not self.specs:
            raise SchemaViolation("layout has no components")

    @property
    def components(self) -> tuple[ComponentId, ...]:
        return tuple(s.id for s in self.specs)

    def spec(self, component: ComponentId) -> ComponentSpec:
        for s in self.specs:
            if s.id == component:
                return s
        raise NotFound(f"component {component} not in layout")

    def block_components(self, block: str) -> tuple[ComponentId, ...]:
        return tuple(c for c in self.components if c.block == block)

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "components": [
                {
                    "block": s.id.block,
                    "role": s.id.role,
                    "axis": s.axis.value,
                    "rows": s.rows,
                    "cols": s.cols,
                }
                for s in self.specs
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Layout":
        if not isinstance(data, Mapping):
            raise SchemaViolation("layout must be an object")
        blocks = _field(data, "blocks", list, "layout")
        comps = _field(data, "components", list, "layout")
        specs = []
        for i, c in enumerate(comps):
            where = f"layout.components[{i}]"
            if not isinstance(c, Mapping):
                raise SchemaViolation(f"{where} must be an object")
            block = _field(c, "block", str, where)
            role = _field(c, "role", str, where)
            axis = c.get("axis", CovarianceAxis.TEMPORAL.value)
            try:
                axis = CovarianceAxis(axis)
            except ValueError:
                raise SchemaViolation(f"{where}.axis: unknown covariance axis {axis!r}") from None
            rows = _optional_dim(c, "rows", where)
            cols = _optional_dim(c, "cols", where)
            specs.append(ComponentSpec(ComponentId(block, role), axis, rows, cols))
        if not all(isinstance(b, str) and b for b in blocks):
            raise SchemaViolation("layout.blocks must be non-empty strings")
        return cls(tuple(specs), tuple(blocks))


def canonical_layout(rows: int | None = None, cols: int | None = None,
                     pool_axis: CovarianceAxis = CovarianceAxis.TEMPORAL) -> Layout:
    """The 14-component layout: four branches x (HSGAL1, HSGAL2, POOL) plus GAT_S, GAT_T."""
    specs = []
    for b in CANONICAL_BRANCHES:
        for role in BRANCH_ROLES:
            axis = pool_axis if role == POOL else CovarianceAxis.TEMPORAL
            c = None if axis is CovarianceAxis.CROSS_SAMPLE else cols
            specs.append(ComponentSpec(ComponentId(b, role), axis, rows, c))
    for g in CANONICAL_GLOBALS:
        specs.append(ComponentSpec(ComponentId(g, GLOBAL), CovarianceAxis.TEMPORAL, rows, cols))
    return Layout(tuple(specs), CANONICAL_BRANCHES + CANONICAL_GLOBALS)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_label: str
    detector_score: float | None = None

    def __post_init__(self):
        if not self.sample_id:
            raise SchemaViolation("empty sample_id")
        if not self.class_label:
            raise SchemaViolation(f"sample {self.sample_id!r} has an empty class_label")


@dataclass(frozen=True, eq=False)
class ActivationMatrix:
    component: ComponentId
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise SchemaViolation(f"activation must be a non-empty 2-D matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"activation for {self.component} contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TensorRef:
    path: Path
    offset: int = 0


@dataclass(frozen=True)
class DatasetManifest:
    layout: Layout
    samples: tuple[SampleRecord, ...]
    tensor_index: Mapping[tuple[str, ComponentId], TensorRef]
    format_version: int = FORMAT_VERSION
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id.update({s.sample_id: s for s in self.samples})

    def sample(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise NotFound(f"unknown sample {sample_id!r}") from None

    def read(self, sample_id: str, component: ComponentId) -> np.ndarray:
        return read_activation(self, sample_id, component).values


# ---------------------------------------------------------------------------
# tensor encoding


def encode_tensor(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
        raise SchemaViolation(f"tensor must be a non-empty 2-D matrix, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("refusing to encode non-finite values")
    rows, cols = v.shape
    return HEADER.pack(MAGIC, rows, cols) + np.ascontiguousarray(v, dtype="<f8").tobytes()


def decode_header(buf: bytes, where: str = "tensor") -> tuple[int, int]:
    if len(buf) < HEADER.size:
        raise CorruptHeader(f"{where}: truncated header")
    magic, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptHeader(f"{where}: bad magic {magic!r}")
    if rows < 1 or cols < 1:
        raise CorruptHeader(f"{where}: zero dimension ({rows}x{cols})")
    return rows, cols


def decode_tensor(buf: bytes, where: str = "tensor") -> np.ndarray:
    rows, cols = decode_header(buf, where)
    need = HEADER.size + 8 * rows * cols
    if len(buf) < need:
        raise CorruptHeader(f"{where}: payload truncated ({len(buf)} < {need} bytes)")
    v = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=HEADER.size)
    v = v.astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue(f"{where}: non-finite values in payload")
    return v


def write_activation(path: str | os.PathLike, matrix: ActivationMatrix) -> None:
    data = encode_tensor(matrix.values)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_record(ref: TensorRef, where: str) -> np.ndarray:
    try:
        with open(ref.path, "rb") as fh:
            fh.seek(ref.offset)
            head = fh.read(HEADER.size)
            rows, cols = decode_header(head, where)
            payload = fh.read(8 * rows * cols)
    except FileNotFoundError:
        raise DanglingTensorRef(f"{where}: file {ref.path} does not exist") from None
    except OSError as exc:
        raise IoFailure(f"{where}: {exc}") from exc
    return decode_tensor(head + payload, where)


def read_activation(manifest: DatasetManifest, sample_id: str,
                    component: ComponentId) -> ActivationMatrix:
    ref = manifest.tensor_index.get((sample_id, component))
    if ref is None:
        raise NotFound(f"no tensor for sample {sample_id!r}, component {component}")
    values = _read_record(ref, f"{sample_id}/{component}")
    return ActivationMatrix(component, values)


# ---------------------------------------------------------------------------
# manifest


def _field(obj: Mapping, key: str, typ, where: str):
    if key not in obj:
        raise SchemaViolation(f"{where}: missing field {key!r}")
    val = obj[key]
    if typ is int and isinstance(val, bool):
        raise SchemaViolation(f"{where}.{key}: expected int")
    if not isinstance(val, typ):
        raise SchemaViolation(f"{where}.{key}: expected {typ.__name__}, got {type(val).__name__}")
    return val


def _optional_dim(obj: Mapping, key: str, where: str):
    val = obj.get(key)
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, int) or val < 1:
        raise SchemaViolation(f"{where}.{key}: expected positive int or null")
    return val


def _parse_samples(raw: list) -> tuple[SampleRecord, ...]:
    out, seen = [], set()
    for i, s in enumerate(raw):
        where = f"samples[{i}]"
        if not isinstance(s, Mapping):
            raise SchemaViolation(f"{where} must be an object")
        sid = _field(s, "sample_id", str, where)
        label = _field(s, "class_label", str, where)
        score = s.get("detector_score")
        if score is not None:
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise SchemaViolation(f"{where}.detector_score: expected number or null")
            score = float(score)
            if not np.isfinite(score):
                raise SchemaViolation(f"{where}.detector_score: not finite")
        if sid in seen:
            raise DuplicateSampleId(f"sample_id {sid!r} appears more than once")
        seen.add(sid)
        out.append(SampleRecord(sid, label, score))
    return tuple(out)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load and fully validate a manifest; tensor headers are checked against the layout."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(data, Mapping):
        raise SchemaViolation("manifest root must be an object")
    version = _field(data, "format_version", int, "manifest")
    if version != FORMAT_VERSION:
        raise SchemaViolation(f"unsupported format_version {version}")
    layout = Layout.from_dict(_field(data, "layout", dict, "manifest"))
    samples = _parse_samples(_field(data, "samples", list, "manifest"))
    sample_ids = {s.sample_id for s in samples}
    components = set(layout.components)

    root = path.parent
    index: dict[tuple[str, ComponentId], TensorRef] = {}
    for i, t in enumerate(_field(data, "tensors", list, "manifest")):
        where = f"tensors[{i}]"
        if not isinstance(t, Mapping):
            raise SchemaViolation(f"{where} must be an object")
        sid = _field(t, "sample", str, where)
        comp = ComponentId.parse(_field(t, "component", str, where))
        rel = _field(t, "path", str, where)
        offset = t.get("offset", 0)
        if isinstance(offset, bool) or not isinstance(offset, int) or offset < 0:
            raise SchemaViolation(f"{where}.offset: expected non-negative int")
        if sid not in sample_ids:
            raise SchemaViolation(f"{where}: unknown sample {sid!r}")
        if comp not in components:
            raise SchemaViolation(f"{where}: component {comp} not in layout")
        if (sid, comp) in index:
            raise SchemaViolation(f"{where}: duplicate tensor entry for {sid}/{comp}")
        index[(sid, comp)] = TensorRef(root / rel, offset)

    for s in samples:
        for c in layout.components:
            if (s.sample_id, c) not in index:
                raise SchemaViolation(f"no tensor entry for sample {s.sample_id!r}, component {c}")

    for (sid, comp), ref in index.items():
        _check_ref(ref, layout.spec(comp), f"{sid}/{comp}")

    return DatasetManifest(layout, samples, index, version)


def _check_ref(ref: TensorRef, spec: ComponentSpec, where: str) -> None:
    try:
        size = ref.path.stat().st_size
        with open(ref.path, "rb") as fh:
            fh.seek(ref.offset)
            head = fh.read(HEADER.size)
    except FileNotFoundError:
        raise DanglingTensorRef(f"{where}: file {ref.path} does not exist") from None
    except OSError as exc:
        raise IoFailure(f"{where}: {exc}") from exc
    rows, cols = decode_header(head, where)
    if spec.rows is not None and rows != spec.rows:
        raise SchemaViolation(f"{where}: header says D={rows} but layout declares D={spec.rows}")
    if spec.cols is not None and cols != spec.cols:
        raise SchemaViolation(f"{where}: header says N={cols} but layout declares N={spec.cols}")
    if size < ref.offset + HEADER.size + 8 * rows * cols:
        raise CorruptHeader(f"{where}: payload truncated")


def manifest_dict(layout: Layout, samples: Iterable[SampleRecord],
                  tensors: Iterable[tuple[str, ComponentId, str, int]]) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layout": layout.to_dict(),
        "samples": [
            {"sample_id": s.sample_id, "class_label": s.class_label,
             "detector_score": s.detector_score}
            for s in samples
        ],
        "tensors": [
            {"sample": sid, "component": str(comp), "path": rel, "offset": off}
            for sid, comp, rel, off in tensors
        ],
    }


def write_manifest(path: str | os.PathLike, layout: Layout, samples: Iterable[SampleRecord],
                   tensors: Iterable[tuple[str, ComponentId, str, int]]) -> None:
    data = manifest_dict(layout, samples, tensors)
    try:
        Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_scores_csv(path: str | os.PathLike) -> dict[str, tuple[str, float]]:
    """Read an external detector score file with columns sample_id,label,score."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"score file {path} does not exist")
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "label", "score"} <= set(reader.fieldnames):
            raise SchemaViolation(f"{path}: expected columns sample_id,label,score")
        for row in reader:
            try:
                score = float(row["score"])
            except ValueError:
                raise SchemaViolation(f"{path}: bad score {row['score']!r}") from None
            if not np.isfinite(score):
                raise SchemaViolation(f"{path}: non-finite score for {row['sample_id']!r}")
            if row["sample_id"] in out:
                raise DuplicateSampleId(f"{path}: sample {row['sample_id']!r} repeated")
            out[row["sample_id"]] = (row["label"], score)
    return out
