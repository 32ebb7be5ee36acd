"""Synthetic multi-branch activations with planted strategies.

Every activation matrix is ``noise_scale * M @ Z`` with ``Z`` standard normal
(D x N) and ``M = I + (f - 1) Q Q^T`` for an orthonormal set ``Q`` of
``ceil(k / 2)`` directions chosen per class and component.  The covariance
therefore has ``f**2`` times the baseline variance along ``Q`` and is
untouched elsewhere, so a plant shows up in the eigen-spectrum but not in any
per-feature mean.  Factors ``f`` by strategy:

* ``EXPERT(b)``: ``1 + s`` on every component of block ``b``.
* ``CONSENSUS``: ``1 + s/4`` on every component.
* ``CONFLICT(b)``: ``1 + s`` on the HSGAL components of ``b`` and
  ``1 / (1 + s)`` on its POOL component.

Detector scores are planted directly: bona fide ~ N(0, 1), attack ~ N(sep, 1).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import (
    HSGAL1,
    HSGAL2,
    POOL,
    ComponentId,
    Layout,
    SampleRecord,
    canonical_layout,
    encode_tensor,
    write_manifest,
)
from .errors import InvalidConfig, IoFailure

BONAFIDE = "bonafide"

# stream ids keep the random draws for directions, tensors and scores apart
_DIRECTIONS, _TENSORS, _SCORES = 0, 1, 2


class StrategyKind(str, Enum):
    EXPERT = "EXPERT"
    CONSENSUS = "CONSENSUS"
    CONFLICT = "CONFLICT"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    block: str | None = None

    def __post_init__(self):
        kind = StrategyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if (kind is StrategyKind.CONSENSUS) != (self.block is None):
            raise InvalidConfig(f"{kind.value} {'takes no' if self.block else 'needs a'} block")

    def __str__(self):
        return self.kind.value if self.block is None else f"{self.kind.value}({self.block})"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        m = re.fullmatch(r"\s*(EXPERT|CONSENSUS|CONFLICT)\s*(?:\(\s*([^()\s]+)\s*\))?\s*",
                         str(text))
        if not m:
            raise InvalidConfig(f"cannot parse strategy {text!r}")
        return cls(StrategyKind(m.group(1)), m.group(2))

    def factor(self, component: ComponentId, s: float) -> float:
        if self.kind is StrategyKind.CONSENSUS:
            return 1.0 + s / 4.0
        if component.block != self.block:
            return 1.0
        if self.kind is StrategyKind.EXPERT:
            return 1.0 + s
        if component.role in (HSGAL1, HSGAL2):
            return 1.0 + s
        if component.role == POOL:
            return 1.0 / (1.0 + s)
        return 1.0


def expert(block: str) -> Strategy:
    return Strategy(StrategyKind.EXPERT, block)


def conflict(block: str) -> Strategy:
    return Strategy(StrategyKind.CONFLICT, block)


CONSENSUS = Strategy(StrategyKind.CONSENSUS)


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[str, ...]
    strategy_map: Mapping[str, Strategy]
    layout: Layout = field(default_factory=canonical_layout)
    D: int = 16
    N: int = 32
    samples_per_class: int = 200
    signal_strength: float = 4.0
    noise_scale: float = 1.0
    seed: int = 0
    k: int = 10
    score_separation: float | Mapping[str, float] = 3.0

    def __post_init__(self):
        classes = tuple(str(c) for c in self.classes)
        object.__setattr__(self, "classes", classes)
        smap = {str(c): s if isinstance(s, Strategy) else Strategy.parse(s)
                for c, s in dict(self.strategy_map).items()}
        object.__setattr__(self, "strategy_map", smap)
        if len(classes) < 1 or len(set(classes)) != len(classes) or not all(classes):
            raise InvalidConfig("classes must be distinct non-empty labels")
        if self.samples_per_class < 2:
            raise InvalidConfig("samples_per_class must be >= 2")
        if self.D < 1 or self.N < 2:
            raise InvalidConfig("need D >= 1 and N >= 2")
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        if not (math.isfinite(self.signal_strength) and self.signal_strength >= 0):
            raise InvalidConfig("signal_strength must be a finite value >= 0")
        if not (math.isfinite(self.noise_scale) and self.noise_scale > 0):
            raise InvalidConfig("noise_scale must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        for c in classes:
            if c == BONAFIDE:
                continue
            if c not in smap:
                raise InvalidConfig(f"no strategy for class {c!r}")
            st = smap[c]
            if st.block is not None and st.block not in self.layout.blocks:
                raise InvalidConfig(f"class {c!r}: unknown block {st.block!r}")
        extra = set(smap) - set(classes)
        if extra:
            raise InvalidConfig(f"strategies for unknown classes {sorted(extra)}")

    def separation(self, label: str) -> float:
        if label == BONAFIDE:
            return 0.0
        if isinstance(self.score_separation, Mapping):
            return float(self.score_separation.get(label, 3.0))
        return float(self.score_separation)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        try:
            if "layout" in d:
                d["layout"] = Layout.from_dict(d["layout"])
            d["classes"] = tuple(d["classes"])
            d["strategy_map"] = {c: Strategy.parse(s) for c, s in d.get("strategy_map", {}).items()}
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise InvalidConfig(f"bad synth config: {exc}") from exc


@dataclass(frozen=True, eq=False)
class SynthDataset:
    layout: Layout
    samples: tuple[SampleRecord, ...]
    activations: Mapping[ComponentId, np.ndarray]   # each (n_samples, D, N), sample order

    @property
    def labels(self) -> list[str]:
        return [s.class_label for s in self.samples]

    def stack(self, component: ComponentId) -> np.ndarray:
        return self.activations[component]

    def save(self, directory: str | os.PathLike, manifest_name: str = "manifest.json") -> Path:
        """Write one packed tensor file per sample plus a manifest; returns its path."""
        out = Path(directory)
        try:
            (out / "tensors").mkdir(parents=True, exist_ok=True)
            refs = []
            for i, s in enumerate(self.samples):
                rel = f"tensors/{s.sample_id}.bin"
                offset = 0
                with open(out / rel, "wb") as fh:
                    for comp in self.layout.components:
                        blob = encode_tensor(self.activations[comp][i])
                        fh.write(blob)
                        refs.append((s.sample_id, comp, rel, offset))
                        offset += len(blob)
        except OSError as exc:
            raise IoFailure(f"cannot write dataset to {out}: {exc}") from exc
        path = out / manifest_name
        write_manifest(path, self.layout, self.samples, refs)
        return path


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def directions(config: SynthConfig, class_index: int, comp_index: int, D: int) -> np.ndarray:
    """Orthonormal (D, r) planting directions for one class and component."""
    r = min(D, math.ceil(config.k / 2))
    g = _rng(config.seed, _DIRECTIONS, class_index, comp_index).standard_normal((D, r))
    q, rr = np.linalg.qr(g)
    return q * np.where(np.diag(rr) < 0, -1.0, 1.0)


def generate(config: SynthConfig) -> SynthDataset:
    layout = config.layout
    comps = layout.components
    samples = []
    for ci, label in enumerate(config.classes):
        mu = config.separation(label)
        scores = _rng(config.seed, _SCORES, ci).standard_normal(config.samples_per_class) + mu
        for i in range(config.samples_per_class):
            samples.append(SampleRecord(f"{label}_{i:05d}", label, float(scores[i])))

    activations = {}
    for j, comp in enumerate(comps):
        spec = layout.spec(comp)
        D = spec.rows or config.D
        N = spec.cols or config.N
        parts = []
        for ci, label in enumerate(config.classes):
            Z = _rng(config.seed, _TENSORS, ci, j).standard_normal((config.samples_per_class, D, N))
            st = config.strategy_map.get(label)
            f = 1.0 if st is None else st.factor(comp, config.signal_strength)
            if f != 1.0:
                Q = directions(config, ci, j, D)
                M = np.eye(D) + (f - 1.0) * (Q @ Q.T)
                Z = np.matmul(M, Z)
            parts.append(config.noise_scale * Z)
        activations[comp] = np.concatenate(parts)
    return SynthDataset(layout, tuple(samples), activations)


def expert_config(blocks: Sequence[str] = ("B0", "B1", "B2", "B3"), consensus: int = 1,
                  bonafide: bool = True, **kwargs) -> SynthConfig:
    """One EXPERT attack per listed block, optional CONSENSUS attacks and a bona fide class."""
    classes, smap = [], {}
    if bonafide:
        classes.append(BONAFIDE)
    for i, b in enumerate(blocks):
        name = f"X{i}_{b}"
        classes.append(name)
        smap[name] = expert(b)
    for i in range(consensus):
        name = f"CONS{i}"
        classes.append(name)
        smap[name] = CONSENSUS
    return SynthConfig(tuple(classes), smap, **kwargs)
