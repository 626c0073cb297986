import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmat.metrics import confusion_metrics, roc_auc


def pairwise_auc(s, y):
    pos, neg = s[y], s[~y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pair_counting_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        # coarse grid so ties actually happen
        s = np.round(rng.random(n) * 2, int(rng.integers(0, 3)))
        assert roc_auc(s, y) == pairwise_auc(s, y)


def test_auc_examples():
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0


def test_auc_single_class_is_an_error():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.booleans()), min_size=1, max_size=40), st.floats(0, 2))
def test_confusion_counts_match_brute_force(rows, threshold):
    s = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    m = confusion_metrics(s, y, threshold)
    tp = sum(1 for si, yi in rows if si > threshold and yi)
    fp = sum(1 for si, yi in rows if si > threshold and not yi)
    fn = sum(1 for si, yi in rows if si <= threshold and yi)
    tn = len(rows) - tp - fp - fn
    assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    assert m.precision == p and m.recall == r
    assert m.f1 == (2 * p * r / (p + r) if p + r else 0.0)


def test_score_equal_to_threshold_is_a_non_match():
    m = confusion_metrics([1.0, 1.5], [1, 0], threshold=1.0)
    assert (m.tp, m.fp, m.fn, m.tn) == (0, 1, 1, 0)
