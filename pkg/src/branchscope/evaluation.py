"""Error rates, correlations and the operational-archetype rule.

Scores follow one orientation throughout: higher means more spoof-like.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, EmptyScores, LengthMismatch, OutOfRange, ZeroVariance


@dataclass(frozen=True, eq=False)
class ScoreSet:
    bona_scores: np.ndarray
    spoof_scores: np.ndarray

    def __post_init__(self):
        bona = np.asarray(self.bona_scores, dtype=np.float64).ravel()
        spoof = np.asarray(self.spoof_scores, dtype=np.float64).ravel()
        if len(bona) == 0 or len(spoof) == 0:
            raise EmptyScores("both bona fide and spoof scores are required")
        if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
            raise EmptyScores("scores must be finite")
        object.__setattr__(self, "bona_scores", bona)
        object.__setattr__(self, "spoof_scores", spoof)


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float


class ArchetypeLabel(str, Enum):
    EFFECTIVE_SPECIALIZATION = "EFFECTIVE_SPECIALIZATION"
    EFFECTIVE_CONSENSUS = "EFFECTIVE_CONSENSUS"
    INEFFECTIVE_CONSENSUS = "INEFFECTIVE_CONSENSUS"
    INEFFECTIVE_SPECIALIZATION = "INEFFECTIVE_SPECIALIZATION"
    FLAWED_SPECIALIZATION = "FLAWED_SPECIALIZATION"


@dataclass(frozen=True)
class ArchetypeThresholds:
    eer_low: float = 1.0
    eer_high: float = 10.0
    share: float = 20.0

    def __post_init__(self):
        if not self.eer_low < self.eer_high:
            raise OutOfRange("archetype thresholds need eer_low < eer_high")


@dataclass(frozen=True)
class GroupStats:
    label: str
    mean: float
    std: float
    var: float
    count: int


def _rates(bona: np.ndarray, spoof: np.ndarray, thresholds: np.ndarray):
    b = np.sort(bona)
    s = np.sort(spoof)
    frr = 1.0 - np.searchsorted(b, thresholds, side="left") / len(b)
    far = np.searchsorted(s, thresholds, side="left") / len(s)
    return far, frr


def eer(scores: ScoreSet | tuple) -> EERResult:
    """Equal error rate at the linearly interpolated FAR/FRR crossing.

    FRR(t) is the share of bona fide scores at or above t and FAR(t) the share
    of spoof scores below t.  Both are evaluated at every distinct pooled
    score and one step past the largest; FAR rises and FRR falls along this
    grid, so the first point with FAR >= FRR brackets the crossing.
    """
    if not isinstance(scores, ScoreSet):
        scores = ScoreSet(*scores)
    bona, spoof = scores.bona_scores, scores.spoof_scores
    pooled = np.unique(np.concatenate([bona, spoof]))
    grid = np.append(pooled, np.nextafter(pooled[-1], np.inf))
    far, frr = _rates(bona, spoof, grid)
    diff = far - frr
    i = int(np.argmax(diff >= 0))   # diff at the last grid point is 1, so a hit exists
    if i == 0 or diff[i] == 0:
        return EERResult(float((far[i] + frr[i]) / 2), float(grid[i]))
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    e = far[i - 1] + w * (far[i] - far[i - 1])
    theta = grid[i - 1] + w * (grid[i] - grid[i - 1])
    return EERResult(float(e), float(theta))


def _paired(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise LengthMismatch(f"inputs differ in length ({len(x)} vs {len(y)})", module="evaluation")
    if len(x) < 2:
        raise LengthMismatch("correlation needs at least two pairs", module="evaluation")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _paired(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("correlation is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="stable")
    sv = v[order]
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], len(v)]
    ranks = np.empty(len(v))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b - 1) / 2 + 1
    return ranks


def spearman(xs, ys) -> float:
    x, y = _paired(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


def f1_macro(predicted: Sequence, actual: Sequence) -> float:
    if len(predicted) != len(actual):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(actual)} labels",
                             module="evaluation")
    if len(actual) == 0:
        raise EmptyInput("no labels")
    labels = sorted(set(predicted) | set(actual), key=str)
    scores = []
    for c in labels:
        tp = sum(1 for p, a in zip(predicted, actual) if p == c and a == c)
        fp = sum(1 for p, a in zip(predicted, actual) if p == c and a != c)
        fn = sum(1 for p, a in zip(predicted, actual) if p != c and a == c)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(sum(scores) / len(scores))


def classify_archetype(eer_percent: float, dominant_share_percent: float,
                       thresholds: ArchetypeThresholds = ArchetypeThresholds()) -> ArchetypeLabel:
    e, s = float(eer_percent), float(dominant_share_percent)
    if not (math.isfinite(e) and 0.0 <= e <= 100.0):
        raise OutOfRange(f"EER must lie in [0, 100] percent, got {eer_percent}")
    if not (math.isfinite(s) and 0.0 < s < 100.0):
        raise OutOfRange(f"dominant share must lie in (0, 100) percent, got {dominant_share_percent}")
    special = s >= thresholds.share
    if e < thresholds.eer_low:
        return (ArchetypeLabel.EFFECTIVE_SPECIALIZATION if special
                else ArchetypeLabel.EFFECTIVE_CONSENSUS)
    if e <= thresholds.eer_high:
        return (ArchetypeLabel.INEFFECTIVE_SPECIALIZATION if special
                else ArchetypeLabel.INEFFECTIVE_CONSENSUS)
    return (ArchetypeLabel.FLAWED_SPECIALIZATION if special
            else ArchetypeLabel.INEFFECTIVE_CONSENSUS)


def group_stats(records: Iterable[tuple[str, float]]) -> list[GroupStats]:
    """Dominant-share statistics per archetype, in first-seen order.

    The standard deviation uses the n-1 divisor; a singleton group reports 0.
    """
    groups: dict[str, list[float]] = {}
    for label, share in records:
        key = label.value if isinstance(label, Enum) else str(label)
        groups.setdefault(key, []).append(float(share))
    if not groups:
        raise EmptyInput("no records")
    out = []
    for label, vals in groups.items():
        v = np.asarray(vals)
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(GroupStats(label, float(v.mean()), std, std * std, len(v)))
    return out
