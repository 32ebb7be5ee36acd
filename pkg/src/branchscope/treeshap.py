"""Exact path-dependent TreeSHAP for oblivious-tree ensembles.

The game for one tree is the cover-weighted conditional expectation: a
feature in the coalition routes ``x`` down its branch, a feature outside it
splits the mass between both children in proportion to their training covers.
A node with zero cover splits its (zero) mass evenly.  Ensemble values are
sums of per-tree values plus the class base score.

Three routes compute the same Shapley values:

* :func:`shap_values` runs the extend/unwind path recursion on each tree,
  expanded to an explicit binary tree.
* :func:`shap_batch` evaluates the same per-leaf path polynomials for many
  samples at once with array arithmetic; the pipeline uses it.
* :func:`brute_force_shap` enumerates all feature subsets; it is exponential
  and exists to check the other two.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, MissingCovers, TooManyFeatures
from .gbdt import ObliviousTree, TreeEnsemble

BRUTE_FORCE_MAX_FEATURES = 20


@dataclass(frozen=True, eq=False)
class ShapAttribution:
    sample_id: str
    class_index: int
    phi: np.ndarray
    base_value: float


@dataclass(frozen=True, eq=False)
class ExpandedTree:
    """Explicit binary tree; node i has children 2i+1 (x <= t) and 2i+2 (x > t)."""

    feature: np.ndarray    # -1 at leaves
    threshold: np.ndarray
    cover: np.ndarray
    value: np.ndarray      # (n_nodes, n_classes); meaningful at leaves

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0


def _check_covers(tree: ObliviousTree) -> None:
    c = np.asarray(tree.covers)
    if c.shape != (len(tree.values),) or not np.all(np.isfinite(c)) or np.any(c < 0):
        raise MissingCovers("tree leaves lack valid cover counts")
    if c.sum() <= 0:
        raise MissingCovers("tree has zero total cover")


def expand(tree: ObliviousTree) -> ExpandedTree:
    _check_covers(tree)
    D = tree.depth
    n_nodes = (1 << (D + 1)) - 1
    K = tree.values.shape[1]
    feature = np.full(n_nodes, -1, dtype=np.int64)
    threshold = np.zeros(n_nodes)
    cover = np.zeros(n_nodes)
    value = np.zeros((n_nodes, K))
    first_leaf = (1 << D) - 1
    cover[first_leaf:] = tree.covers
    value[first_leaf:] = tree.values
    for d in range(D - 1, -1, -1):
        start = (1 << d) - 1
        for i in range(start, start + (1 << d)):
            feature[i] = tree.features[d]
            threshold[i] = tree.thresholds[d]
            cover[i] = cover[2 * i + 1] + cover[2 * i + 2]
    return ExpandedTree(feature, threshold, cover, value)


def _fraction(child: float, parent: float) -> float:
    return child / parent if parent > 0 else 0.5


def tree_expected_value(tree: ObliviousTree) -> np.ndarray:
    """Cover-weighted mean leaf value, one entry per class."""
    _check_covers(tree)
    w = tree.covers / tree.covers.sum()
    return w @ tree.values


def expected_value(ensemble: TreeEnsemble) -> np.ndarray:
    out = np.array(ensemble.base_scores, dtype=np.float64)
    for t in ensemble.trees:
        out = out + tree_expected_value(t)
    return out


# ---------------------------------------------------------------------------
# recursive algorithm


class _Path:
    __slots__ = ("d", "z", "o", "w")

    def __init__(self):
        self.d: list[int] = []
        self.z: list[float] = []
        self.o: list[float] = []
        self.w: list[float] = []

    def copy(self) -> "_Path":
        p = _Path()
        p.d, p.z, p.o, p.w = self.d[:], self.z[:], self.o[:], self.w[:]
        return p

    def extend(self, pz: float, po: float, pi: int) -> None:
        l = len(self.d)
        self.d.append(pi)
        self.z.append(pz)
        self.o.append(po)
        self.w.append(1.0 if l == 0 else 0.0)
        w = self.w
        for i in range(l - 1, -1, -1):
            w[i + 1] += po * w[i] * (i + 1) / (l + 1)
            w[i] = pz * w[i] * (l - i) / (l + 1)

    def unwind(self, i: int) -> None:
        l = len(self.d) - 1
        o, z = self.o[i], self.z[i]
        w = self.w
        n = w[l]
        for j in range(l - 1, -1, -1):
            if o != 0:
                t = w[j]
                w[j] = n * (l + 1) / ((j + 1) * o)
                n = t - w[j] * z * (l - j) / (l + 1)
            else:
                w[j] = w[j] * (l + 1) / (z * (l - j))
        for lst in (self.d, self.z, self.o):
            del lst[i]
        del w[l]

    def unwound_sum(self, i: int) -> float:
        l = len(self.d) - 1
        o, z = self.o[i], self.z[i]
        w = self.w
        total = 0.0
        if o != 0:
            n = w[l]
            for j in range(l - 1, -1, -1):
                t = n * (l + 1) / ((j + 1) * o)
                total += t
                n = w[j] - t * z * (l - j) / (l + 1)
        else:
            for j in range(l - 1, -1, -1):
                total += w[j] * (l + 1) / (z * (l - j))
        return total


def _recurse(t: ExpandedTree, x: np.ndarray, phi: np.ndarray, node: int,
             path: _Path, pz: float, po: float, pi: int) -> None:
    path = path.copy()
    path.extend(pz, po, pi)
    if t.is_leaf(node):
        v = t.value[node]
        for i in range(1, len(path.d)):
            w = path.unwound_sum(i)
            phi[path.d[i]] += w * (path.o[i] - path.z[i]) * v
        return
    f = int(t.feature[node])
    left, right = 2 * node + 1, 2 * node + 2
    hot, cold = (right, left) if x[f] > t.threshold[node] else (left, right)
    iz = io = 1.0
    for k in range(1, len(path.d)):
        if path.d[k] == f:
            iz, io = path.z[k], path.o[k]
            path.unwind(k)
            break
    c = t.cover[node]
    hz = iz * _fraction(t.cover[hot], c)
    cz = iz * _fraction(t.cover[cold], c)
    # a child whose zero and one fractions are both 0 has no weight in any coalition
    if hz != 0 or io != 0:
        _recurse(t, x, phi, hot, path, hz, io, f)
    if cz != 0:
        _recurse(t, x, phi, cold, path, cz, 0.0, f)


def tree_shap(tree: ObliviousTree | ExpandedTree, x: np.ndarray, n_features: int) -> np.ndarray:
    """Per-class Shapley values of one tree, shape (n_features, n_classes)."""
    t = tree if isinstance(tree, ExpandedTree) else expand(tree)
    phi = np.zeros((n_features, t.value.shape[1]))
    _recurse(t, np.asarray(x, dtype=np.float64), phi, 0, _Path(), 1.0, 1.0, -1)
    return phi


def _vector(ensemble: TreeEnsemble, x) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim != 1 or len(x) != ensemble.feature_count:
        raise DimensionMismatch(f"expected a vector of {ensemble.feature_count} features")
    return x


def shap_matrix(ensemble: TreeEnsemble, x) -> tuple[np.ndarray, np.ndarray]:
    """All-class attributions for one sample: (phi (F, K), base values (K,))."""
    x = _vector(ensemble, x)
    phi = np.zeros((ensemble.feature_count, ensemble.n_classes))
    for tree in ensemble.trees:
        phi += tree_shap(tree, x, ensemble.feature_count)
    return phi, expected_value(ensemble)


def shap_values(ensemble: TreeEnsemble, x, class_index: int,
                sample_id: str = "") -> ShapAttribution:
    phi, base = shap_matrix(ensemble, x)
    if not 0 <= class_index < ensemble.n_classes:
        raise DimensionMismatch(f"class index {class_index} out of range")
    return ShapAttribution(sample_id, class_index, phi[:, class_index], float(base[class_index]))


# ---------------------------------------------------------------------------
# vectorised per-leaf evaluation


@lru_cache(maxsize=None)
def _shapley_weights(m: int) -> np.ndarray:
    # weight of a coalition of size s among m players, for the marginal of one player
    return np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
                     for s in range(m)])


def _tree_batch(tree: ObliviousTree, X: np.ndarray, n_features: int) -> np.ndarray:
    """Shapley values of one tree for many samples: (n, n_features, n_classes)."""
    n = len(X)
    K = tree.values.shape[1]
    out = np.zeros((n, n_features, K))
    D = tree.depth
    if D == 0:
        return out
    L = 1 << D
    leaves = np.arange(L)
    bits = (leaves[:, None] >> (D - 1 - np.arange(D))[None, :]) & 1          # (L, D)
    # cover of every prefix node on each leaf's path
    covers = np.asarray(tree.covers, dtype=np.float64)
    node_cover = np.empty((L, D + 1))
    for d in range(D + 1):
        grouped = covers.reshape(1 << d, -1).sum(axis=1)
        node_cover[:, d] = grouped[leaves >> (D - d)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(node_cover[:, :-1] > 0, node_cover[:, 1:] / node_cover[:, :-1], 0.5)
    xbits = np.stack([X[:, f] > t for f, t in zip(tree.features, tree.thresholds)], 1)  # (n, D)
    match = (xbits[:, None, :] == bits[None, :, :]).astype(np.float64)           # (n, L, D)

    uniq = sorted(set(int(f) for f in tree.features))
    m = len(uniq)
    zero = np.ones((L, m))
    one = np.ones((n, L, m))
    for d, f in enumerate(tree.features):
        j = uniq.index(int(f))
        zero[:, j] *= ratio[:, d]
        one[:, :, j] *= match[:, :, d]
    zero = np.broadcast_to(zero, one.shape)
    weights = _shapley_weights(m)
    for j in range(m):
        # coefficients of prod_{i != j} (zero_i + one_i * t)
        poly = np.zeros((n, L, m))
        poly[:, :, 0] = 1.0
        for i in range(m):
            if i == j:
                continue
            shifted = np.zeros_like(poly)
            shifted[:, :, 1:] = poly[:, :, :-1] * one[:, :, i:i + 1]
            poly = poly * zero[:, :, i:i + 1] + shifted
        coef = (poly @ weights) * (one[:, :, j] - zero[:, :, j])                # (n, L)
        out[:, uniq[j], :] += coef @ tree.values
    return out


def shap_batch(ensemble: TreeEnsemble, X) -> tuple[np.ndarray, np.ndarray]:
    """Attributions for many samples: (phi (n, F, K), base values (K,))."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != ensemble.feature_count:
        raise DimensionMismatch(f"expected {ensemble.feature_count} features, got {X.shape[1]}")
    phi = np.zeros((len(X), ensemble.feature_count, ensemble.n_classes))
    for tree in ensemble.trees:
        _check_covers(tree)
        phi += _tree_batch(tree, X, ensemble.feature_count)
    return phi, expected_value(ensemble)


# ---------------------------------------------------------------------------
# exhaustive oracle


def _conditional_value(t: ExpandedTree, x: np.ndarray, mask: int, node: int = 0) -> np.ndarray:
    if t.is_leaf(node):
        return t.value[node]
    f = int(t.feature[node])
    left, right = 2 * node + 1, 2 * node + 2
    if mask >> f & 1:
        nxt = right if x[f] > t.threshold[node] else left
        return _conditional_value(t, x, mask, nxt)
    c = t.cover[node]
    return (_fraction(t.cover[left], c) * _conditional_value(t, x, mask, left)
            + _fraction(t.cover[right], c) * _conditional_value(t, x, mask, right))


def coalition_values(ensemble: TreeEnsemble, x) -> np.ndarray:
    """v(S) for every subset S (bit mask over features), shape (2**F, K)."""
    x = _vector(ensemble, x)
    F = ensemble.feature_count
    if F > BRUTE_FORCE_MAX_FEATURES:
        raise TooManyFeatures(f"{F} features; exhaustive enumeration allows at most "
                              f"{BRUTE_FORCE_MAX_FEATURES}")
    masks = np.arange(1 << F)
    v = np.tile(np.asarray(ensemble.base_scores, dtype=np.float64), (len(masks), 1))
    for tree in ensemble.trees:
        _check_covers(tree)
        t = expand(tree)
        used = sorted(set(int(f) for f in tree.features))
        # the tree only sees the used features, so evaluate it once per projection
        local = np.array([_conditional_value(t, x, sum(1 << used[b] for b in range(len(used))
                                                        if s >> b & 1))
                          for s in range(1 << len(used))]).reshape(1 << len(used), -1)
        proj = np.zeros(len(masks), dtype=np.int64)
        for b, f in enumerate(used):
            proj |= ((masks >> f) & 1) << b
        v += local[proj]
    return v


def brute_force_shap(ensemble: TreeEnsemble, x, class_index: int,
                     sample_id: str = "") -> ShapAttribution:
    """Shapley values by averaging marginal contributions over all subsets."""
    if ensemble.feature_count > BRUTE_FORCE_MAX_FEATURES:
        raise TooManyFeatures(f"{ensemble.feature_count} features; at most "
                              f"{BRUTE_FORCE_MAX_FEATURES} allowed")
    if not 0 <= class_index < ensemble.n_classes:
        raise DimensionMismatch(f"class index {class_index} out of range")
    v = coalition_values(ensemble, x)[:, class_index]
    F = ensemble.feature_count
    masks = np.arange(1 << F)
    sizes = np.array([bin(m).count("1") for m in masks])
    fact = [math.factorial(i) for i in range(F + 1)]
    weight = np.array([fact[s] * fact[F - s - 1] / fact[F] if s < F else 0.0 for s in sizes])
    phi = np.zeros(F)
    for j in range(F):
        without = masks[(masks >> j & 1) == 0]
        phi[j] = np.sum(weight[without] * (v[without | (1 << j)] - v[without]))
    return ShapAttribution(sample_id, class_index, phi, float(v[0]))


# ---------------------------------------------------------------------------
# CSV export


def write_shap_csv(path: str | os.PathLike, attributions) -> None:
    """Rows: sample_id,class,feature_index,phi; feature_index "base" holds the base value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class", "feature_index", "phi"])
        for a in attributions:
            w.writerow([a.sample_id, a.class_index, "base", repr(float(a.base_value))])
            for i, p in enumerate(a.phi):
                w.writerow([a.sample_id, a.class_index, i, repr(float(p))])


def read_shap_csv(path: str | os.PathLike) -> list[ShapAttribution]:
    rows: dict[tuple[str, int], dict] = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["sample_id"], int(r["class"]))
            if key not in rows:
                rows[key] = {"base": 0.0, "phi": {}}
                order.append(key)
            if r["feature_index"] == "base":
                rows[key]["base"] = float(r["phi"])
            else:
                rows[key]["phi"][int(r["feature_index"])] = float(r["phi"])
    out = []
    for key in order:
        d = rows[key]
        n = max(d["phi"], default=-1) + 1
        phi = np.zeros(n)
        for i, p in d["phi"].items():
            phi[i] = p
        out.append(ShapAttribution(key[0], key[1], phi, d["base"]))
    return out
