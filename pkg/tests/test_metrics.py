import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_icc, brute_kappa
from sklearn.metrics import cohen_kappa_score

from cacscore.metrics import (
    EVAL_FIELDS,
    AgreementStats,
    DegenerateAgreementError,
    accuracy,
    agreement,
    confusion_matrix,
    evaluation_table_csv,
    icc_2_1,
    icc_2_1_table,
    mae,
    weighted_kappa_linear,
)

FIXTURE_SEEDS = range(12)


def icc_fixture(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 60))
    truth = rng.gamma(1.0, 200.0, n)
    return truth, truth * rng.uniform(0.7, 1.3) + rng.normal(0, rng.uniform(1, 80), n)


@pytest.mark.parametrize("seed", FIXTURE_SEEDS)
def test_icc_matches_double_sum_oracle(seed):
    a, b = icc_fixture(seed)
    icc, (lo, hi) = icc_2_1(a, b)
    assert abs(icc - brute_icc(np.column_stack([a, b]).tolist())) < 1e-9
    assert lo <= icc <= hi


@pytest.mark.parametrize("seed", FIXTURE_SEEDS)
def test_kappa_matches_double_sum_oracle_and_sklearn(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(5, 200))
    a = rng.integers(0, 5, n)
    b = np.clip(a + rng.integers(-2, 3, n) * (rng.random(n) < 0.4), 0, 4)
    got = weighted_kappa_linear(a, b)
    assert abs(got - brute_kappa(a.tolist(), b.tolist())) < 1e-9
    assert abs(got - cohen_kappa_score(a, b, labels=list(range(5)), weights="linear")) < 1e-9


def test_icc_shrout_fleiss_table():
    # published six-target, four-judge example: ICC(2,1) = 0.29
    table = [[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]]
    icc, (lo, hi) = icc_2_1_table(table)
    assert round(icc, 2) == 0.29
    assert abs(icc - brute_icc(table)) < 1e-12
    assert lo < icc < hi


def test_icc_interval_coverage():
    # two-way random model with true ICC = 1 / (1 + 0.25 + 0.25)
    rng = np.random.default_rng(7)
    true_icc = 1 / 1.5
    hits = 0
    trials = 400
    for _ in range(trials):
        subj = rng.normal(0, 1, 30)
        rater = rng.normal(0, 0.5, 2)
        y = subj[:, None] + rater[None, :] + rng.normal(0, 0.5, (30, 2))
        _, (lo, hi) = icc_2_1_table(y)
        hits += lo <= true_icc <= hi
    assert 0.90 <= hits / trials <= 0.99


def test_icc_interval_shrinks_with_n():
    rng = np.random.default_rng(3)
    widths = []
    for n in (10, 100, 1000):
        reps = []
        for _ in range(25):
            a = rng.normal(0, 1, n)
            lo, hi = icc_2_1(a, a + rng.normal(0, 0.5, n))[1]
            reps.append(hi - lo)
        widths.append(np.median(reps))
    assert widths[0] > widths[1] > widths[2]


def test_icc_identical_is_one():
    assert icc_2_1([1.0, 5.0, 9.0], [1.0, 5.0, 9.0]) == (1.0, (1.0, 1.0))
    assert icc_2_1([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])[0] == 1.0


def test_icc_without_subject_variance():
    # raters disagree by a constant and subjects do not vary: ICC is zero
    assert icc_2_1([1.0, 1.0, 1.0], [2.0, 2.0, 2.0])[0] == 0.0
    with pytest.raises(DegenerateAgreementError):
        icc_2_1([0.0, 1.0], [1.0, 0.0])


def test_icc_interval_defined_for_negative_icc():
    icc, (lo, hi) = icc_2_1([1.0, 0.0, 1.0, 0.0], [0.5, 1.5, 0.5, 1.5])
    assert icc < 0
    assert lo <= icc <= hi <= 1.0
    assert math.isfinite(lo)


def test_icc_input_validation():
    with pytest.raises(ValueError):
        icc_2_1([1.0], [1.0])
    with pytest.raises(ValueError):
        icc_2_1([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        icc_2_1([1.0, math.nan], [1.0, 2.0])


def test_icc_penalises_bias():
    a = np.linspace(0, 100, 50)
    assert icc_2_1(a, a + 1)[0] > icc_2_1(a, a + 30)[0]
    # absolute agreement: a pure offset is not perfect agreement
    assert icc_2_1(a, a + 30)[0] < 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30), st.floats(-1, 1))
def test_icc_symmetric_in_raters(vals, shift):
    a = np.array(vals)
    b = a[::-1] + shift
    if np.ptp(np.concatenate([a, b])) == 0:
        return
    assert icc_2_1(a, b)[0] == pytest.approx(icc_2_1(b, a)[0], abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.data())
def test_kappa_bounds_and_symmetry(a, data):
    b = data.draw(st.lists(st.integers(0, 4), min_size=len(a), max_size=len(a)))
    try:
        k = weighted_kappa_linear(a, b)
    except DegenerateAgreementError:
        return
    assert -1 - 1e-12 <= k <= 1 + 1e-12
    assert k == pytest.approx(weighted_kappa_linear(b, a), abs=1e-12)


def test_kappa_perfect_and_degenerate():
    assert weighted_kappa_linear([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]) == 1.0
    assert weighted_kappa_linear([2, 2, 2], [2, 2, 2]) == 1.0
    # one category each, one apart: observed equals chance agreement
    assert weighted_kappa_linear([2, 2, 2], [3, 3, 3]) == 0.0


def test_kappa_partial_credit():
    # off by one category scores better than off by four
    a = [0, 1, 2, 3, 4, 0, 1, 2]
    near = [1, 1, 2, 3, 4, 0, 1, 2]
    far = [4, 1, 2, 3, 4, 0, 1, 2]
    assert weighted_kappa_linear(a, near) > weighted_kappa_linear(a, far)


def test_confusion_matrix_and_validation():
    m = confusion_matrix([0, 1, 1, 4], [0, 2, 1, 4])
    assert m.sum() == 4 and m[1, 2] == 1 and m[4, 4] == 1
    with pytest.raises(ValueError):
        confusion_matrix([0, 5], [0, 1])
    with pytest.raises(ValueError):
        confusion_matrix([0.5], [0])
    with pytest.raises(ValueError):
        confusion_matrix([], [])


def test_accuracy_and_mae():
    assert accuracy([0, 1, 2, 3], [0, 1, 3, 3]) == 0.75
    assert mae([1.0, 2.0], [2.0, 4.0]) == 1.5
    with pytest.raises(ValueError):
        accuracy([], [])


def test_agreement_categorises_scores():
    ref = np.array([0.0, 0.5, 5.0, 50.0, 200.0, 800.0])
    st_ = agreement(ref, ref)
    assert st_.icc == 1.0 and st_.kappa_linear == 1.0 and st_.accuracy == 1.0 and st_.mae == 0.0
    # a negative prediction is treated as zero for categorisation
    st2 = agreement(ref, ref - np.array([2.0, 0, 0, 0, 0, 0]))
    assert st2.accuracy == 1.0


def test_agreement_without_categories():
    st_ = agreement([1.0, 2.0, 3.0], [1.0, 2.5, 3.0], categorical=False)
    assert st_.kappa_linear is None and st_.accuracy is None and st_.n == 3


def test_agreement_stats_invariants():
    with pytest.raises(ValueError):
        AgreementStats(0.9, (0.95, 0.99), None, None, 1.0, 3)
    with pytest.raises(ValueError):
        AgreementStats(math.nan, (0.0, 1.0), None, None, 1.0, 3)


def test_evaluation_table_csv():
    rows = [("i", "agatston", AgreementStats(0.9, (0.8, 0.95), 0.85, 0.8, 3.5, 10)),
            ("i", "volume", AgreementStats(0.9, (0.8, 0.95), None, None, 4.0, 10))]
    lines = evaluation_table_csv(rows).splitlines()
    assert lines[0] == ",".join(EVAL_FIELDS)
    assert lines[1] == "i,agatston,0.9,0.8,0.95,0.85,0.8,3.5"
    assert lines[2] == "i,volume,0.9,0.8,0.95,,,4.0"


def test_offset_lowers_icc_example():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert icc_2_1(a, a + 10)[0] < 1.0


def test_opposite_constant_raters_kappa_not_positive():
    assert weighted_kappa_linear([0] * 6, [4] * 6) <= 0


def test_mae_example():
    assert mae([0.0, 10.0], [1.0, 8.0]) == 1.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
def test_mae_triangle_inequality(rows):
    a, b, c = (np.array(col) for col in zip(*rows))
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2000), min_size=2, max_size=30))
def test_perfect_accuracy_means_perfect_kappa(scores):
    from cacscore.refscore import category_index

    cats = category_index(np.array(scores))
    if len(set(cats.tolist())) < 2:
        return
    assert accuracy(cats, cats) == 1.0 and weighted_kappa_linear(cats, cats) == 1.0
