import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import concordant_auc
from wsiscreen.errors import DimensionError, ValidationError
from wsiscreen.metrics import ConfusionCounts, auc, dice, pr_auc, roc_auc, sens_spec


def brute_pr_auc(scores, labels):
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        area += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return area


class TestDice:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2), bool)
        b = a.copy()
        a[0, 0] = b[1, 1] = True
        assert dice(a, b) == 0.0

    def test_counts(self):
        pred = np.array([1, 1, 1, 0, 0], bool)
        truth = np.array([1, 1, 0, 1, 0], bool)
        assert dice(pred, truth) == pytest.approx(4 / 6)

    def test_both_empty(self):
        assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(np.zeros(3, bool), np.zeros(4, bool))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 6, 6)) < rng.uniform(0, 1)
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0


class TestRates:
    def test_paper_scale(self):
        assert sens_spec(ConfusionCounts(tp=99, fn=3, tn=5, fp=1)).sensitivity == pytest.approx(0.9706, abs=1e-4)

    def test_perfect(self):
        assert sens_spec(ConfusionCounts(tp=1, fp=0, tn=4, fn=2)).specificity == 1.0
        assert sens_spec(ConfusionCounts(tp=3, fp=2, tn=4, fn=0)).sensitivity == 1.0

    def test_undefined_flagged(self):
        rates = sens_spec(ConfusionCounts(tp=0, fn=0, tn=3, fp=1))
        assert rates.sensitivity is None
        assert rates.specificity == 0.75

    def test_from_labels(self):
        c = ConfusionCounts.from_labels([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            ConfusionCounts(tp=-1)


class TestAuc:
    def test_separated(self):
        scores = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        assert auc(scores, kind="roc") == 1.0
        assert auc(scores, kind="pr") == 1.0

    def test_hand_counted(self):
        assert roc_auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(ValidationError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_null(self):
        rng = np.random.default_rng(7)
        labels = np.arange(10_000) % 2
        assert abs(roc_auc(rng.random(10_000), labels) - 0.5) <= 0.02

    def test_concordant_pairs_with_ties(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            scores = rng.integers(0, 6, n) / 5.0
            labels = np.arange(n) % 2
            rng.shuffle(labels)
            assert roc_auc(scores, labels) == concordant_auc(scores, labels)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(9)
        s = rng.random(50)
        y = np.arange(50) % 3 == 0
        assert roc_auc(s, y) == roc_auc(np.exp(3 * s) - 7, y)

    def test_pr_step_interpolation(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            scores = list(rng.integers(0, 8, n) / 7.0)
            labels = [int(v) for v in (np.arange(n) % 2)]
            assert pr_auc(scores, labels) == pytest.approx(brute_pr_auc(scores, labels), abs=1e-12)
