"""Ranking metrics over scored impressions: AUC, user-grouped AUC, log loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

PROB_EPS = 1e-7


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredImpressions:
    users: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users)
        self.scores = np.asarray(self.scores, np.float64)
        self.labels = np.asarray(self.labels, np.int64)
        if not (self.users.shape == self.scores.shape == self.labels.shape):
            raise ValueError("users, scores and labels must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    @classmethod
    def from_lists(cls, users, scores, labels) -> "ScoredImpressions":
        return cls(np.asarray(users), np.asarray(scores), np.asarray(labels))


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # midranks: a tie contributes half a pair
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(imps: ScoredImpressions) -> float:
    """Share of positive/negative pairs ordered correctly; ties count one half."""
    return _auc(imps.scores, imps.labels)


def gauc(imps: ScoredImpressions) -> float:
    """Impression-weighted mean of per-user AUC over users having both classes."""
    order = np.argsort(imps.users, kind="stable")
    users = imps.users[order]
    scores = imps.scores[order]
    labels = imps.labels[order]
    bounds = np.flatnonzero(np.r_[True, users[1:] != users[:-1], True])
    num = den = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        y = labels[a:b]
        if 0 < y.sum() < y.size:
            num += (b - a) * _auc(scores[a:b], y)
            den += b - a
    if den == 0:
        raise UndefinedMetricError("no user has both positive and negative impressions")
    return num / den


def logloss(imps: ScoredImpressions, eps: float = PROB_EPS) -> float:
    p = np.clip(imps.scores, eps, 1 - eps)
    y = imps.labels
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
