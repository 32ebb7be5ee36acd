import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchscope.errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyDataset,
    NonFiniteFeature,
    SingleClassDataset,
)
from branchscope.gbdt import (
    ObliviousTree,
    TrainConfig,
    TreeEnsemble,
    fit,
    predict_proba,
    predict_raw,
    softmax,
)

FAST = TrainConfig(iterations=30, learning_rate=0.3, depth=3, bins=16)


def blobs(seed, n=60, F=4, K=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, K, n)
    X = rng.normal(size=(n, F)) + y[:, None] * 0.8
    return X, [f"k{v}" for v in y]


def test_separable_one_feature():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 100)
    x[np.abs(x) < 1e-3] = 0.5
    labels = ["pos" if v > 0 else "neg" for v in x]
    model = fit(x[:, None], labels, TrainConfig(iterations=200))
    acc = np.mean([p == l for p, l in zip(model.predict(x[:, None]), labels)])
    assert acc == 1.0


def test_single_class_and_empty_and_non_finite():
    with pytest.raises(SingleClassDataset):
        fit(np.zeros((5, 2)), ["a"] * 5, FAST)
    with pytest.raises(EmptyDataset):
        fit(np.zeros((0, 2)), [], FAST)
    X = np.ones((4, 2))
    X[1, 1] = np.nan
    with pytest.raises(NonFiniteFeature):
        fit(X, ["a", "b", "a", "b"], FAST)


def test_bit_identical_reruns_and_workers():
    X, y = blobs(1, n=80, F=40)
    a = fit(X, y, TrainConfig(iterations=15, depth=3, bins=16, worker_parallelism=1))
    b = fit(X, y, TrainConfig(iterations=15, depth=3, bins=16, worker_parallelism=1))
    c = fit(X, y, TrainConfig(iterations=15, depth=3, bins=16, worker_parallelism=5))
    assert a.to_json() == b.to_json() == c.to_json()


def test_zero_trees_gives_base_scores():
    m = TreeEnsemble([], np.array([0.1, -0.3]), ("a", "b"), 3, [])
    assert np.array_equal(predict_raw(m, np.zeros(3)), [0.1, -0.3])


def test_depth0_tree_adds_leaf():
    t = ObliviousTree(np.zeros(0, int), np.zeros(0), np.array([[0.2, -0.2]]), np.array([10.0]))
    m = TreeEnsemble([t], np.array([1.0, 1.0]), ("a", "b"), 2, [])
    assert np.allclose(predict_raw(m, [5.0, 6.0]), [1.2, 0.8])


def test_dimension_mismatch():
    m = TreeEnsemble([], np.zeros(2), ("a", "b"), 3, [])
    with pytest.raises(DimensionMismatch):
        predict_raw(m, np.zeros(4))


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros((1, 13))), 1 / 13)
    assert np.allclose(softmax(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]])
    m = TreeEnsemble([], np.array([math.log(2), 0.0]), ("a", "b"), 1, [])
    assert np.allclose(predict_proba(m, [0.0]), [2 / 3, 1 / 3])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_structure_and_normalization(seed):
    X, y = blobs(seed)
    model = fit(X, y, FAST)
    for t in model.trees:
        assert len(t.values) == 2 ** t.depth
        assert t.covers.sum() == len(X)
        assert np.all(t.features < X.shape[1])
    P = model.predict_proba(np.random.default_rng(seed).normal(size=(20, 4)) * 5)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
    raw = model.predict_raw(X)
    assert np.array_equal(model.predict_proba(X), softmax(raw))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_training_loss_never_increases(seed):
    X, y = blobs(seed)
    h = fit(X, y, FAST).loss_history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_model_json_round_trip():
    X, y = blobs(3)
    m = fit(X, y, FAST)
    back = TreeEnsemble.from_json(m.to_json())
    assert back.to_json() == m.to_json()
    assert np.array_equal(back.predict_raw(X), m.predict_raw(X))


def test_config_validation():
    for bad in ({"depth": 17}, {"bins": 1}, {"bins": 65536}, {"learning_rate": 0}, {"iterations": -1}):
        with pytest.raises(ConfigInvalid):
            TrainConfig(**bad)
    with pytest.raises(ConfigInvalid):
        TrainConfig.from_dict({"depht": 3})


def test_early_stopping_truncates():
    X, y = blobs(4, n=120)
    cfg = TrainConfig(iterations=300, learning_rate=0.5, depth=3, bins=16, early_stopping_rounds=5)
    m = fit(X[:80], y[:80], cfg, eval_set=(X[80:], y[80:]))
    assert len(m.trees) < 300
