"""Ranking metrics for link prediction: AUC, average precision, Hits@N."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

log = logging.getLogger(__name__)

DEFAULT_HITS = (10, 20, 50, 100)


def _check(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("metrics need at least one positive and one negative score")
    return pos, neg


def auc(pos_scores, neg_scores) -> float:
    """P(positive outranks negative), ties counted as one half (Mann-Whitney U)."""
    pos, neg = _check(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def average_precision(pos_scores, neg_scores) -> float:
    """Mean precision at each positive's rank, descending score.

    Tied negatives are ranked ahead of tied positives (pessimistic).
    """
    pos, neg = _check(pos_scores, neg_scores)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, np.int8), np.zeros(neg.size, np.int8)])
    order = np.lexsort((labels, -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    tp = np.arange(1, pos.size + 1)
    return math.fsum((tp / ranks).tolist()) / pos.size


def hits_at_n(pos_scores, neg_scores, n: int) -> float:
    """Fraction of positives scoring strictly above the n-th highest negative."""
    if n < 1:
        raise ContractError(f"N must be >= 1, got {n}")
    pos, neg = _check(pos_scores, neg_scores)
    if n > neg.size:
        log.warning("Hits@%d requested with only %d negatives; returning 1.0", n, neg.size)
        return 1.0
    threshold = np.partition(neg, neg.size - n)[neg.size - n]
    return float(np.count_nonzero(pos > threshold) / pos.size)


@dataclass
class MetricsReport:
    split_name: str
    auc: float
    ap: float
    hits_at_n: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in [self.auc, self.ap, *self.hits_at_n.values()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric value {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits_at_n"] = {str(k): v for k, v in self.hits_at_n.items()}
        return d


def evaluate_scores(pos_scores, neg_scores, split_name: str, hits=DEFAULT_HITS) -> MetricsReport:
    return MetricsReport(
        split_name=split_name,
        auc=auc(pos_scores, neg_scores),
        ap=average_precision(pos_scores, neg_scores),
        hits_at_n={n: hits_at_n(pos_scores, neg_scores, n) for n in hits if n <= len(np.ravel(neg_scores))},
    )
