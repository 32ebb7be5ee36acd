import numpy as np
import pytest

from branchscope.gbdt import ObliviousTree, TreeEnsemble


def random_tree(rng, n_features, depth, n_classes, zero_cover_p=0.0):
    feats = rng.integers(0, n_features, depth)
    thr = rng.normal(size=depth).round(2)
    values = rng.normal(size=(2 ** depth, n_classes))
    covers = rng.integers(1, 50, 2 ** depth).astype(float)
    covers[rng.random(2 ** depth) < zero_cover_p] = 0.0
    if covers.sum() == 0:
        covers[0] = 1.0
    return ObliviousTree(feats, thr, values, covers)


def random_ensemble(rng, n_features=5, n_trees=3, depth=3, n_classes=2, zero_cover_p=0.0):
    trees = [random_tree(rng, n_features, int(rng.integers(1, depth + 1)), n_classes, zero_cover_p)
             for _ in range(n_trees)]
    return TreeEnsemble(trees, rng.normal(size=n_classes),
                        tuple(f"c{i}" for i in range(n_classes)), n_features, [])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
