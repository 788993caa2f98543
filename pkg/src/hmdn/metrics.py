from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .exceptions import ShapeError, UndefinedMetricError

EPS = 1e-12


def log_loss(probs, labels):
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def total_loss(probs, labels, l_rq, alpha):
    """Cross-entropy plus ``alpha`` times the quantization loss.

    Predictions are clamped to [1e-12, 1 - 1e-12] before taking logs.
    """
    return log_loss(probs, labels) + alpha * l_rq


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores receive their average rank, so a tie between a positive and a
    negative counts one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ in shape")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
