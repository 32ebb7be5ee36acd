"""Multiclass gradient boosting over oblivious (symmetric) decision trees.

Each boosting iteration grows one oblivious tree: every level applies one
(feature, threshold) test to all nodes of that level, so a tree of depth d has
2**d leaves addressed by the bit pattern of the level tests (first level is
the most significant bit, "right" means ``x > threshold``).  Leaves hold one
value per class.  Splits are chosen on quantile-binned features by the total
Newton gain over all nodes and classes; leaf values are Newton steps
``-G / (H + l2)`` scaled by the learning rate, with softmax gradients
``g = p - y`` and diagonal hessians ``h = p (1 - p)``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyDataset,
    NonFiniteFeature,
    SingleClassDataset,
)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
LOSS_SLACK = 1e-12
FEATURE_CHUNK = 16


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 0.03
    depth: int = 6
    l2_leaf_reg: float = 3.0
    bins: int = 255
    seed: int = 0
    worker_parallelism: int = 8
    random_strength: float = 0.0
    early_stopping_rounds: int | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigInvalid("iterations must be >= 0", module="gbdt")
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be > 0", module="gbdt")
        if not 1 <= self.depth <= 16:
            raise ConfigInvalid("depth must be in [1, 16]", module="gbdt")
        if self.l2_leaf_reg < 0:
            raise ConfigInvalid("l2_leaf_reg must be >= 0", module="gbdt")
        if not 2 <= self.bins <= 65535:
            raise ConfigInvalid("bins must be in [2, 65535]", module="gbdt")
        if self.worker_parallelism < 1:
            raise ConfigInvalid("worker_parallelism must be >= 1", module="gbdt")
        if self.random_strength < 0:
            raise ConfigInvalid("random_strength must be >= 0", module="gbdt")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown train keys {sorted(unknown)}", module="gbdt")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(f"bad train config: {exc}", module="gbdt") from exc


@dataclass(frozen=True, eq=False)
class ObliviousTree:
    features: np.ndarray    # (depth,) int
    thresholds: np.ndarray  # (depth,) float
    values: np.ndarray      # (2**depth, n_classes)
    covers: np.ndarray      # (2**depth,) float

    @property
    def depth(self) -> int:
        return len(self.features)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        for f, t in zip(self.features, self.thresholds):
            idx = idx * 2 + (X[:, f] > t)
        return idx

    def to_dict(self) -> dict:
        return {
            "level_splits": [[int(f), float(t)] for f, t in zip(self.features, self.thresholds)],
            "leaves": [{"values": [float(v) for v in vals], "cover": float(c)}
                       for vals, c in zip(self.values, self.covers)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObliviousTree":
        splits = d["level_splits"]
        leaves = d["leaves"]
        return cls(
            np.array([int(f) for f, _ in splits], dtype=np.int64),
            np.array([float(t) for _, t in splits], dtype=np.float64),
            np.array([leaf["values"] for leaf in leaves], dtype=np.float64),
            np.array([leaf["cover"] for leaf in leaves], dtype=np.float64),
        )


@dataclass(eq=False)
class TreeEnsemble:
    trees: list[ObliviousTree]
    base_scores: np.ndarray
    classes: tuple[str, ...]
    feature_count: int
    bin_edges: list[np.ndarray]
    loss_history: list[float] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(getattr(X, "values", X), dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.feature_count:
            raise DimensionMismatch(f"expected {self.feature_count} features, got {X.shape[1]}")
        return X, single

    def predict_raw(self, X) -> np.ndarray:
        X, single = self._check(X)
        out = np.tile(self.base_scores, (len(X), 1))
        for tree in self.trees:
            out += tree.values[tree.leaf_index(X)]
        return out[0] if single else out

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.predict_raw(X))

    def predict(self, X) -> list[str]:
        p = np.atleast_2d(self.predict_proba(X))
        return [self.classes[i] for i in p.argmax(axis=1)]

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "classes": list(self.classes),
            "base_scores": [float(b) for b in self.base_scores],
            "feature_count": int(self.feature_count),
            "bin_edges": [[float(e) for e in edges] for edges in self.bin_edges],
            "config": _config_dict(self.config),
            "loss_history": [float(x) for x in self.loss_history],
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise DimensionMismatch(f"unsupported model format_version {d.get('format_version')}")
        cfg = d.get("config")
        return cls(
            trees=[ObliviousTree.from_dict(t) for t in d["trees"]],
            base_scores=np.array(d["base_scores"], dtype=np.float64),
            classes=tuple(d["classes"]),
            feature_count=int(d["feature_count"]),
            bin_edges=[np.array(e, dtype=np.float64) for e in d["bin_edges"]],
            loss_history=list(d.get("loss_history", [])),
            config=TrainConfig(**cfg) if cfg else None,
        )

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(text))


def _config_dict(config: TrainConfig | None) -> dict | None:
    if config is None:
        return None
    d = asdict(config)
    # runtime knob only; models must not depend on it
    d.pop("worker_parallelism")
    return d


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_loss(raw: np.ndarray, y: np.ndarray) -> float:
    m = raw.max(axis=1)
    lse = m + np.log(np.exp(raw - m[:, None]).sum(axis=1))
    return float(np.mean(lse - raw[np.arange(len(y)), y]))


def quantile_borders(column: np.ndarray, bins: int) -> np.ndarray:
    """Split candidates: midpoints between distinct values, thinned to quantiles."""
    u = np.unique(column)
    if len(u) < 2:
        return np.empty(0)
    mids = (u[:-1] + u[1:]) / 2
    if len(mids) <= bins - 1:
        return mids
    qs = np.quantile(column, np.linspace(0, 1, bins + 1)[1:-1])
    pick = np.unique(np.searchsorted(u, qs, side="left").clip(1, len(u) - 1))
    return mids[pick - 1]


def _bin(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    Xb = np.empty(X.shape, dtype=np.int32)
    for f, e in enumerate(edges):
        Xb[:, f] = np.searchsorted(e, X[:, f], side="left")
    return Xb


def _node_score(G: np.ndarray, H: np.ndarray, l2: float) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    return np.divide(G * G, H + l2, out=np.zeros(np.shape(G)), where=(H + l2) > 0)


def _score_inplace(G: np.ndarray, H: np.ndarray, l2: float) -> np.ndarray:
    """G**2 / (H + l2), overwriting both inputs."""
    np.multiply(G, G, out=G)
    if l2 > 0:
        H += l2
        return np.divide(G, H, out=G)
    return np.divide(G, H, out=np.zeros_like(G), where=H > 0)


class _SplitSearch:
    """Histogram split scoring over a fixed feature chunk."""

    def __init__(self, Xb: np.ndarray, n_edges: np.ndarray, lo: int, hi: int, l2: float):
        self.lo, self.hi = lo, hi
        self.l2 = l2
        self.nb = int(n_edges.max(initial=0)) + 1
        self.cols = np.ascontiguousarray(Xb[:, lo:hi], dtype=np.int64)
        self.valid = np.arange(self.nb - 1)[None, :] < n_edges[lo:hi, None]
        F = hi - lo
        self.offsets = (np.arange(F) * self.nb)[None, :]

    def gains(self, node: np.ndarray, n_nodes: int, g: np.ndarray, h: np.ndarray,
              Gp: np.ndarray, Hp: np.ndarray) -> np.ndarray:
        """Total split score for every (feature, border) of this chunk."""
        n, K = g.shape
        F = self.hi - self.lo
        if F == 0 or self.nb < 2:
            return np.full((F, max(self.nb - 1, 0)), -np.inf)
        P = n_nodes
        # flat index ((f * nb) + bin) * P + node
        idx = ((self.offsets + self.cols) * P + node[:, None]).ravel()
        size = F * self.nb * P
        total = None
        for k in range(K):
            Gh = np.bincount(idx, weights=np.repeat(g[:, k], F), minlength=size)
            Hh = np.bincount(idx, weights=np.repeat(h[:, k], F), minlength=size)
            GL = np.cumsum(Gh.reshape(F, self.nb, P), axis=1)[:, :-1]
            HL = np.cumsum(Hh.reshape(F, self.nb, P), axis=1)[:, :-1]
            # node totals come from the caller so every chunk subtracts identical numbers
            GR = Gp[:, k] - GL
            HR = Hp[:, k] - HL
            sk = _score_inplace(GL, HL, self.l2)
            sk += _score_inplace(GR, HR, self.l2)
            if total is None:
                total = sk
            else:
                total += sk
        out = total.sum(axis=2)
        return np.where(self.valid, out, -np.inf)


def _prepare(features, labels):
    X = np.asarray([getattr(v, "values", v) for v in features], dtype=np.float64)
    if X.size == 0 or len(labels) == 0:
        raise EmptyDataset("no training rows")
    if X.ndim != 2:
        raise DimensionMismatch("feature vectors must have a uniform length")
    if len(labels) != len(X):
        raise DimensionMismatch(f"{len(X)} feature rows but {len(labels)} labels")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("training features contain non-finite values")
    classes = tuple(sorted(set(str(l) for l in labels)))
    if len(classes) < 2:
        raise SingleClassDataset(f"need >= 2 distinct labels, got {list(classes)}")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[str(l)] for l in labels], dtype=np.int64)
    return X, y, classes


def fit(features, labels: Sequence, config: TrainConfig = TrainConfig(),
        eval_set: tuple | None = None) -> TreeEnsemble:
    """Train the boosted ensemble.

    ``features`` is an (n, F) array or a list of meta-feature vectors.
    ``eval_set=(X_val, y_val)`` enables early stopping when
    ``config.early_stopping_rounds`` is set.
    """
    X, y, classes = _prepare(features, labels)
    n, F = X.shape
    K = len(classes)
    edges = [quantile_borders(X[:, f], config.bins) for f in range(F)]
    n_edges = np.array([len(e) for e in edges], dtype=np.int64)
    Xb = _bin(X, edges)
    Y = np.zeros((n, K))
    Y[np.arange(n), y] = 1.0

    counts = np.bincount(y, minlength=K).astype(np.float64)
    base = np.log(counts / n)
    raw = np.tile(base, (n, 1))
    l2 = config.l2_leaf_reg
    lr = config.learning_rate
    rng = np.random.default_rng(config.seed)

    # chunking is fixed so worker count never changes which sums are formed
    searches = [_SplitSearch(Xb, n_edges, lo, min(lo + FEATURE_CHUNK, F), l2)
                for lo in range(0, F, FEATURE_CHUNK)]
    workers = max(1, min(config.worker_parallelism, len(searches)))
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    val = None
    if eval_set is not None and config.early_stopping_rounds:
        Xv = np.asarray([getattr(v, "values", v) for v in eval_set[0]], dtype=np.float64)
        lookup = {c: i for i, c in enumerate(classes)}
        yv = np.array([lookup[str(l)] for l in eval_set[1]], dtype=np.int64)
        val = (Xv, yv, np.tile(base, (len(Xv), 1)))
    best_val, best_iter = np.inf, 0

    trees: list[ObliviousTree] = []
    loss = log_loss(raw, y)
    history = [loss]
    try:
        for it in range(config.iterations):
            p = softmax(raw)
            g = p - Y
            h = p * (1.0 - p)
            node = np.zeros(n, dtype=np.int64)
            feats, thrs = [], []
            for d in range(config.depth):
                n_nodes = 1 << d
                Gp = np.stack([np.bincount(node, weights=g[:, k], minlength=n_nodes) for k in range(K)], 1)
                Hp = np.stack([np.bincount(node, weights=h[:, k], minlength=n_nodes) for k in range(K)], 1)
                if pool is None:
                    parts = [s.gains(node, n_nodes, g, h, Gp, Hp) for s in searches]
                else:
                    parts = list(pool.map(lambda s: s.gains(node, n_nodes, g, h, Gp, Hp), searches))
                width = max(s.nb - 1 for s in searches)
                gain = np.full((F, max(width, 1)), -np.inf)
                for s, part in zip(searches, parts):
                    gain[s.lo:s.hi, :part.shape[1]] = part
                if config.random_strength > 0:
                    noise = rng.standard_normal(gain.shape) * config.random_strength * float(np.std(g))
                    gain = np.where(np.isfinite(gain), gain + noise, gain)
                parent = _node_score(Gp, Hp, l2).sum()
                flat = int(np.argmax(gain))
                f, b = divmod(flat, gain.shape[1])
                if not np.isfinite(gain[f, b]) or gain[f, b] - parent <= 0:
                    break
                feats.append(f)
                thrs.append(float(edges[f][b]))
                node = node * 2 + (Xb[:, f] > b)

            n_leaves = 1 << len(feats)
            G = np.stack([np.bincount(node, weights=g[:, k], minlength=n_leaves) for k in range(K)], 1)
            H = np.stack([np.bincount(node, weights=h[:, k], minlength=n_leaves) for k in range(K)], 1)
            cover = np.bincount(node, minlength=n_leaves).astype(np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(H + l2 > 0, -G / (H + l2), 0.0)
            values = lr * step
            # guard the non-increasing training loss contract against Newton overshoot
            for _ in range(60):
                new_raw = raw + values[node]
                new_loss = log_loss(new_raw, y)
                if new_loss <= loss + LOSS_SLACK:
                    break
                values = values / 2
            else:
                values = np.zeros_like(values)
                new_raw, new_loss = raw, loss
            tree = ObliviousTree(np.array(feats, dtype=np.int64), np.array(thrs), values, cover)
            trees.append(tree)
            raw, loss = new_raw, new_loss
            history.append(loss)

            if val is not None:
                Xv, yv, rv = val
                rv += tree.values[tree.leaf_index(Xv)]
                vl = log_loss(rv, yv)
                if vl < best_val - LOSS_SLACK:
                    best_val, best_iter = vl, it + 1
                elif it + 1 - best_iter >= config.early_stopping_rounds:
                    log.info("early stop at iteration %d (best %d)", it + 1, best_iter)
                    trees = trees[:best_iter]
                    history = history[:best_iter + 1]
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    return TreeEnsemble(trees, base, classes, F, edges, history, config)


def predict_raw(ensemble: TreeEnsemble, x) -> np.ndarray:
    return ensemble.predict_raw(x)


def predict_proba(ensemble: TreeEnsemble, x) -> np.ndarray:
    return ensemble.predict_proba(x)
