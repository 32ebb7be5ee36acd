"""Aggregation of feature attributions into branch-level responsibility.

Per-feature Shapley values are summed into component values (one component
owns ``k`` contiguous meta-features), averaged over an attack's samples, and
summed per block into the Branch Attribution Sum.  The confidence score
discounts the absolute sum by the spread of the block's component means, and
a softmax over blocks turns confidence scores into contribution shares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .dataio import ComponentId, Layout
from .errors import (
    DegenerateLength,
    EmptyBlock,
    InsufficientSamples,
    LayoutMismatch,
    LengthMismatch,
    NonFiniteScore,
    NoSamplesForAttack,
    UnsupportedAlpha,
)

Z_QUANTILES = {0.10: 1.645, 0.05: 1.96, 0.01: 2.576}
BOOTSTRAP_ROUNDS = 200


class Penalty(str, Enum):
    LINEAR = "LINEAR"
    QUADRATIC = "QUADRATIC"
    EXPONENTIAL = "EXPONENTIAL"
    NONE = "NONE"


ALL_PENALTIES = (Penalty.LINEAR, Penalty.QUADRATIC, Penalty.EXPONENTIAL, Penalty.NONE)


class SigmaMode(str, Enum):
    POPULATION = "population"
    SAMPLE = "sample"


@dataclass(frozen=True, eq=False)
class ComponentAttribution:
    attack: str
    component: ComponentId
    mean_phi: float
    n: int
    ci_half_width: float
    values: np.ndarray | None = field(default=None, repr=False)  # per-sample phi


@dataclass(frozen=True)
class BranchAttribution:
    attack: str
    block: str
    phi_sum: float
    ci_half_width: float


@dataclass(frozen=True)
class ConfidenceScore:
    attack: str
    block: str
    penalty: Penalty
    value: float


@dataclass(frozen=True, eq=False)
class ShareVector:
    attack: str
    blocks: tuple[str, ...]
    shares: np.ndarray
    scores: np.ndarray | None = None

    @property
    def dominant_index(self) -> int:
        # rank on the scores when known: softmax can round distinct scores to
        # equal shares.  np.argmax keeps the earliest block on exact ties.
        return int(np.argmax(self.shares if self.scores is None else self.scores))

    @property
    def dominant_block(self) -> str:
        return self.blocks[self.dominant_index]

    @property
    def dominant_share(self) -> float:
        return float(self.shares[self.dominant_index])


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    std: float
    se: float
    ci_half_width: float
    n: int
    alpha: float


def z_value(alpha: float) -> float:
    for a, z in Z_QUANTILES.items():
        if math.isclose(alpha, a, rel_tol=0, abs_tol=1e-12):
            return z
    raise UnsupportedAlpha(f"alpha must be one of {sorted(Z_QUANTILES)}, got {alpha}")


def mean_ci(values: Sequence[float], alpha: float = 0.05) -> SummaryStats:
    x = np.asarray(values, dtype=np.float64).ravel()
    z = z_value(alpha)
    n = len(x)
    if n < 2:
        raise InsufficientSamples(f"need at least 2 values for a confidence interval, got {n}")
    mean = float(x.mean())
    s = float(x.std(ddof=1))
    se = s / math.sqrt(n)
    return SummaryStats(mean, s, se, z * se, n, alpha)


def _half_width(values: np.ndarray, alpha: float) -> float:
    # a single sample has no spread to estimate; report a zero-width interval
    return mean_ci(values, alpha).ci_half_width if len(values) >= 2 else 0.0


def component_matrix(phi: np.ndarray, n_components: int, k: int) -> np.ndarray:
    """Sum feature attributions into component attributions: (n, C*k) -> (n, C)."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.shape[1] != n_components * k:
        raise LayoutMismatch(f"{phi.shape[1]} features do not match {n_components} components x k={k}")
    return phi.reshape(len(phi), n_components, k).sum(axis=2)


def component_phi(attributions, layout: Layout, attack: str, k: int,
                  labels: Mapping[str, str], classes: Sequence[str],
                  alpha: float = 0.05) -> list[ComponentAttribution]:
    """Mean component attributions over the samples labelled ``attack``.

    Only attributions for the attack's own class column are used; ``labels``
    maps sample ids to class labels and ``classes`` gives the class order of
    the model.
    """
    if attack not in classes:
        raise NoSamplesForAttack(f"attack {attack!r} is not a model class")
    cls = list(classes).index(attack)
    rows = [a.phi for a in attributions
            if a.class_index == cls and labels.get(a.sample_id) == attack]
    if not rows:
        raise NoSamplesForAttack(f"no attributions for samples of attack {attack!r}")
    comp = component_matrix(np.vstack(rows), len(layout.components), k)
    return components_from_matrix(comp, layout, attack, alpha)


def components_from_matrix(comp: np.ndarray, layout: Layout, attack: str,
                           alpha: float = 0.05) -> list[ComponentAttribution]:
    comp = np.atleast_2d(np.asarray(comp, dtype=np.float64))
    if comp.shape[1] != len(layout.components):
        raise LayoutMismatch(f"{comp.shape[1]} columns for {len(layout.components)} components")
    if len(comp) == 0:
        raise NoSamplesForAttack(f"no samples for attack {attack!r}")
    return [ComponentAttribution(attack, c, float(comp[:, j].mean()), len(comp),
                                 _half_width(comp[:, j], alpha), comp[:, j].copy())
            for j, c in enumerate(layout.components)]


def _select(components: Sequence[ComponentAttribution], block: str) -> list[ComponentAttribution]:
    chosen = [c for c in components if c.component.block == block]
    if not chosen:
        raise EmptyBlock(f"no components for block {block!r}")
    return chosen


def branch_sum(components: Sequence[ComponentAttribution], block: str,
               alpha: float = 0.05) -> BranchAttribution:
    chosen = _select(components, block)
    phi = sum(c.mean_phi for c in chosen)
    if all(c.values is not None for c in chosen) and len({len(c.values) for c in chosen}) == 1:
        per_sample = np.sum([c.values for c in chosen], axis=0)
        ci = _half_width(per_sample, alpha)
    else:
        # without per-sample values, combine the component intervals as if independent
        ci = math.sqrt(sum(c.ci_half_width ** 2 for c in chosen))
    return BranchAttribution(chosen[0].attack, block, float(phi), ci)


def block_sigma(means: Sequence[float], mode: SigmaMode | str = SigmaMode.POPULATION) -> float:
    m = np.asarray(means, dtype=np.float64)
    if len(m) < 2 or np.all(m == m[0]):
        return 0.0
    return float(m.std(ddof=1 if SigmaMode(mode) is SigmaMode.SAMPLE else 0))


def penalize(phi_sum: float, sigma: float, penalty: Penalty | str) -> float:
    a = abs(phi_sum)
    p = Penalty(penalty)
    if p is Penalty.LINEAR:
        return a / (1.0 + sigma)
    if p is Penalty.QUADRATIC:
        return a / (1.0 + sigma * sigma)
    if p is Penalty.EXPONENTIAL:
        return a / math.exp(sigma)
    return a


def confidence(components: Sequence[ComponentAttribution], penalty: Penalty | str = Penalty.LINEAR,
               sigma_mode: SigmaMode | str = SigmaMode.POPULATION) -> ConfidenceScore:
    """Variance-penalised confidence of one block (all components must share it)."""
    if not components:
        raise EmptyBlock("confidence needs at least one component")
    blocks = {c.component.block for c in components}
    if len(blocks) != 1:
        raise LayoutMismatch(f"components span several blocks: {sorted(blocks)}")
    means = [c.mean_phi for c in components]
    value = penalize(sum(means), block_sigma(means, sigma_mode), penalty)
    return ConfidenceScore(components[0].attack, blocks.pop(), Penalty(penalty), value)


def shares(scores: Sequence[float], blocks: Sequence[str], attack: str = "") -> ShareVector:
    c = np.asarray(scores, dtype=np.float64)
    if len(c) != len(blocks):
        raise LengthMismatch(f"{len(c)} scores for {len(blocks)} blocks", module="attribution")
    if len(c) < 2:
        raise DegenerateLength("shares need at least two blocks")
    if not np.all(np.isfinite(c)):
        raise NonFiniteScore("confidence scores must be finite")
    e = np.exp(c - c.max())
    return ShareVector(attack, tuple(blocks), e / e.sum(), c)


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b; NaN when either input is constant."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if len(x) != len(y):
        raise LengthMismatch(f"rankings differ in length ({len(x)} vs {len(y)})",
                             module="attribution")
    if len(x) < 2:
        raise DegenerateLength("kendall tau needs at least two items")
    iu = np.triu_indices(len(x), 1)
    sx = np.sign(x[:, None] - x[None, :])[iu].astype(np.int64)
    sy = np.sign(y[:, None] - y[None, :])[iu].astype(np.int64)
    s = int(np.sum(sx * sy))
    tx = int(np.count_nonzero(sx))
    ty = int(np.count_nonzero(sy))
    if tx == 0 or ty == 0:
        return float("nan")
    return s / math.sqrt(tx * ty)


def block_ranks(scores: Sequence[float]) -> np.ndarray:
    """Rank of each block by score, 1 = largest; ties share the average rank."""
    c = -np.asarray(scores, dtype=np.float64)
    order = np.argsort(c, kind="stable")
    ranks = np.empty(len(c))
    i = 0
    while i < len(c):
        j = i
        while j + 1 < len(c) and c[order[j + 1]] == c[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# per-attack report


@dataclass(frozen=True, eq=False)
class AttributionReport:
    attack: str
    n: int
    blocks: tuple[str, ...]
    components: tuple[ComponentAttribution, ...]
    branches: tuple[BranchAttribution, ...]
    scores: Mapping[Penalty, tuple[ConfidenceScore, ...]]
    score_ci: Mapping[Penalty, np.ndarray]
    shares: Mapping[Penalty, ShareVector]
    share_ci: Mapping[Penalty, np.ndarray]

    def score_values(self, penalty: Penalty = Penalty.LINEAR) -> np.ndarray:
        return np.array([s.value for s in self.scores[Penalty(penalty)]])

    @property
    def dominant_block(self) -> str:
        return self.shares[Penalty.LINEAR].dominant_block

    @property
    def dominant_share(self) -> float:
        return self.shares[Penalty.LINEAR].dominant_share


def _scores_from_matrix(comp: np.ndarray, groups: list[np.ndarray], penalty: Penalty,
                        sigma_mode: SigmaMode) -> np.ndarray:
    means = comp.mean(axis=0)
    return np.array([penalize(means[g].sum(), block_sigma(means[g], sigma_mode), penalty)
                     for g in groups])


def attack_report(comp: np.ndarray, layout: Layout, attack: str,
                  penalties: Sequence[Penalty | str] = ALL_PENALTIES, alpha: float = 0.05,
                  sigma_mode: SigmaMode | str = SigmaMode.POPULATION, seed: int = 0,
                  bootstrap_rounds: int = BOOTSTRAP_ROUNDS) -> AttributionReport:
    """Aggregate one attack's per-sample component attributions, shape (n, C).

    Intervals for scores and shares come from a seeded bootstrap over the
    attack's samples (standard error of the resampled statistic times z),
    since those statistics are nonlinear in the sample means.
    """
    penalties = tuple(Penalty(p) for p in penalties)
    if Penalty.LINEAR not in penalties:
        penalties = (Penalty.LINEAR,) + penalties
    sigma_mode = SigmaMode(sigma_mode)
    z = z_value(alpha)
    comps = components_from_matrix(comp, layout, attack, alpha)
    comp = np.atleast_2d(np.asarray(comp, dtype=np.float64))
    blocks = tuple(layout.blocks)
    index = {c: j for j, c in enumerate(layout.components)}
    groups = [np.array([index[c] for c in layout.block_components(b)], dtype=np.intp)
              for b in blocks]
    for b, g in zip(blocks, groups):
        if len(g) == 0:
            raise EmptyBlock(f"block {b!r} has no components")
    branches = tuple(branch_sum(comps, b, alpha) for b in blocks)

    n = len(comp)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(bootstrap_rounds, n)) if n >= 2 else None
    scores, score_ci, share_vecs, share_ci = {}, {}, {}, {}
    for p in penalties:
        group_comps = [[comps[j] for j in g] for g in groups]
        scores[p] = tuple(confidence(gc, p, sigma_mode) for gc in group_comps)
        values = np.array([s.value for s in scores[p]])
        share_vecs[p] = shares(values, blocks, attack)
        if draws is None:
            score_ci[p] = np.zeros(len(blocks))
            share_ci[p] = np.zeros(len(blocks))
            continue
        boot_c = np.array([_scores_from_matrix(comp[d], groups, p, sigma_mode) for d in draws])
        e = np.exp(boot_c - boot_c.max(axis=1, keepdims=True))
        boot_s = e / e.sum(axis=1, keepdims=True)
        score_ci[p] = z * boot_c.std(axis=0, ddof=1)
        share_ci[p] = z * boot_s.std(axis=0, ddof=1)
    return AttributionReport(attack, n, blocks, tuple(comps), branches, scores, score_ci,
                             share_vecs, share_ci)
