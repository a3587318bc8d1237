import logging
import math
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subsel.errors import ContractError
from subsel.metrics import MetricsReport, auc, average_precision, evaluate_scores, hits_at_n


def auc_pairs(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def ap_definition(pos, neg):
    # descending score, negatives ahead of positives on ties
    items = sorted([(s, 1) for s in pos] + [(s, 0) for s in neg], key=lambda t: (-t[0], t[1]))
    precisions, hits = [], 0
    for rank, (_, label) in enumerate(items, 1):
        if label:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / len(pos)


def hits_sorted(pos, neg, n):
    if n > len(neg):
        return 1.0
    threshold = sorted(neg, reverse=True)[n - 1]
    return sum(p > threshold for p in pos) / len(pos)


class TestExamples:
    def test_auc(self):
        assert auc([2, 3], [0, 1]) == 1.0
        assert auc([1], [1]) == 0.5

    def test_ap(self):
        assert average_precision([3], [1, 2]) == 1.0
        assert average_precision([1], [2, 3]) == pytest.approx(1 / 3, abs=0)

    def test_hits(self):
        assert hits_at_n([5, 0], [1, 2, 3, 4], 2) == 0.5
        assert hits_at_n([0, 0.5], [1, 2], 1) == 0.0

    def test_hits_n_exceeds_negatives(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert hits_at_n([0.0], [1.0], 5) == 1.0
        assert "Hits@5" in caplog.text

    def test_empty(self):
        for f in (auc, average_precision):
            with pytest.raises(ContractError):
                f([], [1.0])
        with pytest.raises(ContractError):
            hits_at_n([1.0], [], 1)
        with pytest.raises(ContractError):
            hits_at_n([1.0], [1.0], 0)


scores = st.lists(st.integers(-5, 5).map(float) | st.floats(-10, 10), min_size=1, max_size=50)


@given(scores, scores, st.integers(1, 60))
def test_match_oracles(pos, neg, n):
    assert auc(pos, neg) == auc_pairs(pos, neg)
    assert average_precision(pos, neg) == ap_definition(pos, neg)
    assert hits_at_n(pos, neg, n) == hits_sorted(pos, neg, n)


int_scores = st.lists(st.integers(-50, 50).map(float), min_size=1, max_size=50)


@given(int_scores, int_scores, st.integers(1, 20))
def test_monotone_invariance(pos, neg, n):
    # integer inputs keep the transformed values distinct, so order is preserved exactly
    for f in (lambda v: math.atan(v) * 3 + 1, lambda v: v**3 - 7, math.exp):
        tp, tn = [f(v) for v in pos], [f(v) for v in neg]
        assert auc(tp, tn) == auc(pos, neg)
        assert hits_at_n(tp, tn, n) == hits_at_n(pos, neg, n)


class TestReport:
    def test_fields_and_hits_filter(self):
        r = evaluate_scores([2.0, 3.0], [0.0] * 15, "test", hits=(10, 20))
        assert r.split_name == "test" and r.auc == 1.0 and r.ap == 1.0
        assert r.hits_at_n == {10: 1.0}
        assert r.to_dict()["hits_at_n"] == {"10": 1.0}

    def test_range_invariant(self):
        with pytest.raises(ValueError):
            MetricsReport("x", 1.2, 0.5)
