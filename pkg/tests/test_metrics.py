import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import cohen_kappa_score, roc_auc_score

from tracemil.metrics import (DetectionCurve, MetricError, confusion, evaluate_probs, micro_auc, random_curve_area,
                              rank_auc, recall_at_fraction, weighted_kappa)


def pair_count_auc(probs, labels):
    """O(n^2) oracle: concordant pairs plus half ties over all positive/negative pairs."""
    probs = np.asarray(probs)
    pos, neg = [], []
    for i, y in enumerate(labels):
        for c in range(3):
            (pos if c == y else neg).append(probs[i, c])
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def kappa_formula(pred, true):
    n = len(pred)
    O = np.zeros((3, 3))
    for p, t in zip(pred, true):
        O[t, p] += 1.0 / n
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    num = sum(abs(i - j) / 2 * O[i, j] for i in range(3) for j in range(3))
    den = sum(abs(i - j) / 2 * E[i, j] for i in range(3) for j in range(3))
    return 1.0 - num / den


def random_probs(rng, n, ties=False):
    raw = rng.random((n, 3))
    if ties:
        raw = np.round(raw * 4) + 1
    return raw / raw.sum(axis=1, keepdims=True)


def random_labels(rng, n):
    y = rng.integers(3, size=n)
    if np.unique(y).size < 2:
        y[0] = (y[0] + 1) % 3
    return y


def test_micro_auc_matches_pair_counting_on_random_cases():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 12))
        probs = random_probs(rng, n, ties=trial % 2 == 0)
        labels = random_labels(rng, n)
        assert abs(micro_auc(probs, labels) - pair_count_auc(probs, labels)) <= 1e-12


def test_micro_auc_six_bag_hand_case():
    probs = np.array([[.7, .2, .1], [.1, .8, .1], [.2, .2, .6], [.5, .4, .1], [.3, .3, .4], [.1, .1, .8]])
    labels = [0, 1, 2, 1, 0, 2]
    assert micro_auc(probs, labels) == pytest.approx(pair_count_auc(probs, labels), abs=1e-15)


def test_micro_auc_agrees_with_sklearn_flattened():
    rng = np.random.default_rng(1)
    probs = random_probs(rng, 50)
    labels = random_labels(rng, 50)
    onehot = np.eye(3)[labels]
    assert micro_auc(probs, labels) == pytest.approx(roc_auc_score(onehot.ravel(), probs.ravel()), abs=1e-12)


def test_perfect_separation_gives_one():
    labels = [0, 1, 2, 2]
    probs = np.eye(3)[labels] * 0.97 + 0.01
    assert micro_auc(probs, labels) == 1.0


def test_identical_labels_are_an_error():
    with pytest.raises(MetricError, match="AUC undefined"):
        micro_auc(np.full((3, 3), 1 / 3), [1, 1, 1])


def test_unnormalized_probabilities_are_rejected():
    with pytest.raises(MetricError):
        micro_auc(np.ones((2, 3)), [0, 1])


def test_shuffled_labels_average_one_half():
    rng = np.random.default_rng(2)
    n = 30
    probs = random_probs(rng, n)
    vals = [micro_auc(probs, random_labels(rng, n)) for _ in range(1000)]
    assert abs(np.mean(vals) - 0.5) <= 3 * np.std(vals) / np.sqrt(len(vals))


@given(seed=st.integers(0, 10 ** 6), power=st.floats(0.2, 5.0))
@settings(max_examples=50, deadline=None)
def test_rank_auc_is_invariant_to_monotone_transforms(seed, power):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, 8)
    labels = random_labels(rng, 8)
    truth = np.eye(3, dtype=bool)[labels]
    base = micro_auc(probs, labels)
    assert rank_auc(probs ** power, truth) == base
    assert rank_auc(np.log(probs) * 3 + 7, truth) == base


def test_kappa_matches_formula_on_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 20))
        pred = rng.integers(3, size=n)
        true = rng.integers(3, size=n)
        if len(set(pred)) == 1 and len(set(true)) == 1:
            continue
        assert abs(weighted_kappa(pred, true) - kappa_formula(pred, true)) <= 1e-12


def test_kappa_nine_bag_hand_case():
    true = [0, 0, 0, 1, 1, 1, 2, 2, 2]
    pred = [0, 0, 1, 1, 1, 1, 2, 2, 0]
    # observed weighted disagreement: one adjacent (1/2) and one extreme (1) error over 9 bags
    rows, cols = np.array([3, 3, 3]) / 9, np.array([3, 4, 2]) / 9
    expected = sum(abs(i - j) / 2 * rows[i] * cols[j] for i in range(3) for j in range(3))
    hand = 1 - (0.5 / 9 + 1.0 / 9) / expected
    assert abs(weighted_kappa(pred, true) - hand) <= 1e-12


def test_kappa_agrees_with_sklearn_linear():
    rng = np.random.default_rng(4)
    pred, true = rng.integers(3, size=80), rng.integers(3, size=80)
    assert weighted_kappa(pred, true) == pytest.approx(cohen_kappa_score(true, pred, weights="linear"), abs=1e-12)


def test_kappa_edge_cases():
    assert weighted_kappa([0, 1, 2], [0, 1, 2]) == 1.0
    assert weighted_kappa([1, 1], [1, 1]) == 1.0
    with pytest.raises(MetricError):
        weighted_kappa([], [])


def test_kappa_independent_predictions_near_zero():
    rng = np.random.default_rng(5)
    vals = [weighted_kappa(rng.integers(3, size=500), rng.integers(3, size=500)) for _ in range(200)]
    assert abs(np.mean(vals)) <= 3 * np.std(vals) / np.sqrt(len(vals))


@given(seed=st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_kappa_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(3, size=15), rng.integers(3, size=15)
    assert weighted_kappa(a, b) == pytest.approx(weighted_kappa(b, a), abs=1e-15)


def test_confusion_layout_and_counting_oracle():
    assert confusion([2], [0])[0, 2] == 1
    np.testing.assert_array_equal(confusion([0, 1, 2, 2], [0, 1, 2, 2]), np.diag([1, 1, 2]))
    rng = np.random.default_rng(6)
    pred, true = rng.integers(3, size=200), rng.integers(3, size=200)
    tally = np.zeros((3, 3), dtype=int)
    for p, t in zip(pred, true):
        tally[t][p] += 1
    cm = confusion(pred, true)
    np.testing.assert_array_equal(cm, tally)
    assert cm.sum() == 200
    with pytest.raises(MetricError):
        confusion([3], [0])


def test_evaluate_probs_bundle():
    probs = np.array([[.8, .1, .1], [.1, .8, .1], [.1, .1, .8]])
    bundle = evaluate_probs(probs, [0, 1, 1])
    assert bundle.kappa < 1.0
    assert bundle.confusion[1, 2] == 1
    assert set(bundle.to_dict()) == {"reader", "micro_auc", "kappa", "confusion"}


def curve_from_hits(hits):
    hits = np.asarray(hits, dtype=float)
    n = hits.size
    return DetectionCurve(np.arange(1, n + 1) / n, np.cumsum(hits) / hits.sum())


def test_recall_at_fraction_perfect_ranking():
    hits = [1] * 16 + [0] * 84
    curve = curve_from_hits(hits)
    assert recall_at_fraction(curve, 0.16) == 1.0
    assert recall_at_fraction(curve, 1.0) == 1.0
    assert recall_at_fraction(curve, 0.005) == 0.0


def test_recall_at_fraction_uses_step_lookup():
    curve = curve_from_hits([1, 0, 1, 0])
    assert recall_at_fraction(curve, 0.74) == 0.5
    assert recall_at_fraction(curve, 0.75) == 1.0
    with pytest.raises(MetricError):
        recall_at_fraction(curve, 0.0)


def test_curve_anchor_renders_to_three_decimals():
    # fixture: 28 of 31 flagged items inside the first 30% of a 100-item ranking
    hits = np.zeros(100)
    hits[:28] = 1
    hits[[40, 60, 80]] = 1
    curve = curve_from_hits(hits)
    assert f"{recall_at_fraction(curve, 0.30):.3f}" == "0.903"


def test_curve_area_and_random_baseline():
    n = 50
    rng = np.random.default_rng(7)
    areas = [curve_from_hits(rng.permutation([1] * 8 + [0] * (n - 8))).area() for _ in range(1000)]
    assert abs(np.mean(areas) - random_curve_area(n)) <= 3 * np.std(areas) / np.sqrt(1000)
    assert curve_from_hits([1, 1, 0, 0]).area() == pytest.approx(0.25 * (0.5 + 1 + 1 + 1))


def test_curve_must_be_monotone():
    with pytest.raises(MetricError):
        DetectionCurve([0.5, 1.0], [0.6, 0.4])
