"""Slide-level classification metrics: accuracy, rank AUC and F1."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

UNDEFINED = float("nan")


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def roc_auc(y_true, scores) -> float:
    """Binary AUC via the Mann-Whitney rank statistic; tied pairs count 0.5.

    Returns NaN when only one class is present.
    """
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(scores)  # average ranks resolve ties as half-wins
    u = ranks[y_true].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(y_true, y_pred, num_classes: int = 2) -> float:
    """F1 of the positive class when binary, macro-F1 otherwise."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = [1] if num_classes == 2 else range(num_classes)
    scores = []
    for c in classes:
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation, ignoring undefined entries."""
    vals = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return UNDEFINED, UNDEFINED
    return float(vals.mean()), float(vals.std())
