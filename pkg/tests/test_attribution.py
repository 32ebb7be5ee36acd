import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from branchscope.attribution import (
    ALL_PENALTIES,
    ComponentAttribution,
    Penalty,
    SigmaMode,
    attack_report,
    block_ranks,
    block_sigma,
    branch_sum,
    component_phi,
    confidence,
    kendall_tau,
    mean_ci,
    penalize,
    shares,
    z_value,
)
from branchscope.dataio import ComponentId, canonical_layout
from branchscope.errors import (
    DegenerateLength,
    EmptyBlock,
    InsufficientSamples,
    LayoutMismatch,
    LengthMismatch,
    NoSamplesForAttack,
    NonFiniteScore,
    UnsupportedAlpha,
)
from branchscope.treeshap import ShapAttribution

BLOCKS = ("B0", "B1", "B2", "B3", "GAT_S", "GAT_T")


def comps(block, means):
    return [ComponentAttribution("A", ComponentId(block, f"R{i}"), m, 1, 0.0) for i, m in enumerate(means)]


def kendall_oracle(a, b):
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        dx, dy = a[i] - a[j], b[i] - b[j]
        if dx != 0:
            tx += 1
        if dy != 0:
            ty += 1
        if dx * dy > 0:
            conc += 1
        elif dx * dy < 0:
            disc += 1
    return (conc - disc) / math.sqrt(tx * ty)


# component_phi -------------------------------------------------------------

def _tiny_layout_attrs(phis, attack="A01"):
    lay = canonical_layout()
    attrs, labels = [], {}
    for i, p in enumerate(phis):
        phi = np.zeros(14 * 3)
        phi[:3] = p
        attrs.append(ShapAttribution(f"s{i}", 1, phi, 0.0))
        labels[f"s{i}"] = attack
    return lay, attrs, labels


def test_component_phi_single_sample():
    lay, attrs, labels = _tiny_layout_attrs([[0.1, 0.2, -0.05]])
    out = component_phi(attrs, lay, "A01", 3, labels, ("bonafide", "A01"))
    assert out[0].mean_phi == pytest.approx(0.25) and out[0].n == 1 and out[0].ci_half_width == 0


def test_component_phi_mean_of_two():
    lay, attrs, labels = _tiny_layout_attrs([[0.2, 0, 0], [0.4, 0, 0]])
    out = component_phi(attrs, lay, "A01", 3, labels, ("bonafide", "A01"))
    assert out[0].mean_phi == pytest.approx(0.3)


def test_component_phi_errors():
    lay, attrs, labels = _tiny_layout_attrs([[0.2, 0, 0]])
    with pytest.raises(NoSamplesForAttack):
        component_phi(attrs, lay, "A99", 3, labels, ("bonafide", "A01"))
    with pytest.raises(NoSamplesForAttack):
        component_phi(attrs, lay, "bonafide", 3, labels, ("bonafide", "A01"))
    with pytest.raises(LayoutMismatch):
        component_phi(attrs, lay, "A01", 4, labels, ("bonafide", "A01"))


# branch sums and confidence -------------------------------------------------

def test_branch_sum_examples():
    assert branch_sum(comps("B2", [1.2, 1.1, 1.05]), "B2").phi_sum == pytest.approx(3.35)
    assert branch_sum(comps("B0", [0.0, 0.0, 0.0]), "B0").phi_sum == 0
    assert branch_sum(comps("GAT_S", [1.5]), "GAT_S").phi_sum == 1.5
    with pytest.raises(EmptyBlock):
        branch_sum(comps("B0", [1.0]), "B1")


def test_confidence_examples():
    assert confidence(comps("B0", [0.5, 0.5, 0.5])).value == 1.5
    assert confidence(comps("B0", [1.0, 0.0]), "LINEAR").value == pytest.approx(1 / 1.5)
    assert confidence(comps("B0", [1.0, 0.0]), "EXPONENTIAL").value == pytest.approx(math.exp(-0.5))
    assert confidence(comps("B0", [1.0, 0.0]), "NONE").value == 1.0
    with pytest.raises(EmptyBlock):
        confidence([])
    with pytest.raises(LayoutMismatch):
        confidence(comps("B0", [1.0]) + comps("B1", [1.0]))


def test_sigma_modes():
    assert block_sigma([1.0, 0.0]) == 0.5
    assert block_sigma([1.0, 0.0], SigmaMode.SAMPLE) == pytest.approx(math.sqrt(0.5))
    assert block_sigma([0.1, 0.1, 0.1]) == 0.0
    assert block_sigma([7.0]) == 0.0


@settings(max_examples=200)
@given(st.floats(-50, 50), st.floats(0, 20))
def test_penalty_bounds_and_ordering(phi, sigma):
    lin = penalize(phi, sigma, Penalty.LINEAR)
    quad = penalize(phi, sigma, Penalty.QUADRATIC)
    expo = penalize(phi, sigma, Penalty.EXPONENTIAL)
    none = penalize(phi, sigma, Penalty.NONE)
    assert none == abs(phi)
    assert max(lin, quad, expo) <= abs(phi)
    assert expo <= lin
    if sigma < 1:
        assert quad >= lin
    elif sigma > 1:
        assert quad <= lin


@given(st.floats(-50, 50))
def test_penalty_collapse(phi):
    values = {p: penalize(phi, 0.0, p) for p in ALL_PENALTIES}
    assert len(set(values.values())) == 1


# shares ---------------------------------------------------------------------

def test_shares_examples():
    assert np.allclose(shares([0.3] * 6, BLOCKS).shares, 1 / 6)
    s = shares([math.log(2), 0, 0, 0, 0, 0], BLOCKS)
    assert np.allclose(s.shares, np.array([2, 1, 1, 1, 1, 1]) / 7)
    assert s.dominant_block == "B0" and s.dominant_share == pytest.approx(2 / 7)
    a09 = shares([2.30, 2.26, 0, 0, 0, 0], BLOCKS).shares
    assert a09[0] / a09[1] == pytest.approx(22.85 / 21.85, rel=0.02)


def test_shares_errors():
    with pytest.raises(LengthMismatch):
        shares([1.0, 2.0], BLOCKS)
    with pytest.raises(DegenerateLength):
        shares([1.0], ("B0",))
    with pytest.raises(NonFiniteScore):
        shares([1.0, np.inf], ("B0", "B1"))


def test_dominant_tie_goes_to_layout_order():
    assert shares([1.0, 2.0, 2.0, 0, 0, 0], BLOCKS).dominant_block == "B1"


finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=200)
@given(st.lists(finite, min_size=2, max_size=10))
def test_share_normalization_and_argmax(scores):
    sv = shares(scores, [f"b{i}" for i in range(len(scores))])
    assert abs(sv.shares.sum() - 1) <= 1e-12
    assert np.all(sv.shares > 0) and np.all(sv.shares <= 1)
    assert sv.dominant_index == int(np.argmax(scores))


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.data(), st.floats(1e-3, 5))
def test_share_monotonicity(scores, data, bump):
    i = data.draw(st.integers(0, len(scores) - 1))
    names = [f"b{j}" for j in range(len(scores))]
    before = shares(scores, names).shares
    raised = list(scores)
    raised[i] += bump
    after = shares(raised, names).shares
    assert after[i] > before[i]
    assert all(after[j] < before[j] for j in range(len(scores)) if j != i)


# kendall --------------------------------------------------------------------

def test_kendall_examples():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)
    with pytest.raises(LengthMismatch):
        kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(DegenerateLength):
        kendall_tau([1], [1])
    assert math.isnan(kendall_tau([1, 1, 1], [1, 2, 3]))


@pytest.mark.parametrize("n", range(2, 7))
def test_kendall_all_permutations_small(n):
    base = list(range(n))
    for p in itertools.permutations(base):
        assert kendall_tau(base, p) == kendall_oracle(base, p)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=12))
def test_kendall_with_ties_matches_oracle(pairs):
    a, b = zip(*pairs)
    assume(len(set(a)) > 1 and len(set(b)) > 1)
    assert kendall_tau(a, b) == pytest.approx(kendall_oracle(a, b), abs=1e-15)


def test_block_ranks():
    assert block_ranks([3.0, 1.0, 2.0, 2.0]).tolist() == [1.0, 4.0, 2.5, 2.5]


# confidence intervals ---------------------------------------------------------

def test_mean_ci_hand_value():
    s = mean_ci([1, 2, 3, 4], 0.05)
    assert s.mean == 2.5
    assert s.std == pytest.approx(1.2910, abs=1e-4)
    assert s.se == pytest.approx(0.6455, abs=1e-4)
    assert s.ci_half_width == pytest.approx(1.2654, abs=1e-3)


def test_mean_ci_edges():
    assert mean_ci([2.0, 2.0, 2.0]).ci_half_width == 0
    with pytest.raises(InsufficientSamples):
        mean_ci([1.0])
    with pytest.raises(UnsupportedAlpha):
        mean_ci([1.0, 2.0], 0.2)
    assert [z_value(a) for a in (0.10, 0.05, 0.01)] == [1.645, 1.96, 2.576]


@settings(max_examples=100)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30))
def test_duplication_scales_se_by_closed_form(values):
    x = np.array(values)
    assume(x.std() > 1e-6)
    n = len(x)
    s1 = mean_ci(x)
    s2 = mean_ci(np.concatenate([x, x]))
    # sample std of the doubled data: s * sqrt(2(n-1)/(2n-1))
    expected = s1.std * math.sqrt(2 * (n - 1) / (2 * n - 1)) / math.sqrt(2 * n)
    assert s2.se == pytest.approx(expected, rel=1e-12)


# full report ----------------------------------------------------------------

def test_report_invariants():
    rng = np.random.default_rng(0)
    lay = canonical_layout()
    comp = rng.normal(size=(40, 14)) + np.r_[np.ones(3), np.zeros(11)]
    r = attack_report(comp, lay, "A", seed=1, bootstrap_rounds=50)
    assert r.blocks == BLOCKS
    for b in r.branches:
        idx = [j for j, c in enumerate(lay.components) if c.block == b.block]
        assert b.phi_sum == pytest.approx(comp[:, idx].mean(axis=0).sum(), abs=1e-12)
    for p in ALL_PENALTIES:
        assert abs(r.shares[p].shares.sum() - 1) <= 1e-12
        assert np.all(r.share_ci[p] >= 0) and np.all(r.score_ci[p] >= 0)
    assert r.dominant_block == "B0"
    again = attack_report(comp, lay, "A", seed=1, bootstrap_rounds=50)
    assert np.array_equal(again.share_ci[Penalty.LINEAR], r.share_ci[Penalty.LINEAR])


def test_report_all_sigma_zero_penalties_identical():
    lay = canonical_layout()
    comp = np.tile(np.repeat(np.arange(6.0) / 10, [3, 3, 3, 3, 1, 1]), (5, 1))
    r = attack_report(comp, lay, "A", bootstrap_rounds=10)
    ref = r.score_values(Penalty.LINEAR)
    for p in ALL_PENALTIES:
        assert np.array_equal(r.score_values(p), ref)


def test_report_single_sample_zero_ci():
    r = attack_report(np.ones((1, 14)), canonical_layout(), "A")
    assert r.n == 1 and np.all(r.share_ci[Penalty.LINEAR] == 0)
