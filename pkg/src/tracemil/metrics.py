"""Evaluation metrics: micro-averaged AUC, linear-weighted kappa, confusion
matrices and detection-curve lookups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import N_CLASSES


class MetricError(ValueError):
    pass


def rank_auc(scores, positive) -> float:
    """Binary AUC from the Mann-Whitney rank statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positive, dtype=bool).ravel()
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both positive and negative entries")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def micro_auc(probabilities, labels) -> float:
    """One-vs-rest AUC over all flattened (bag, class) decisions."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1, N_CLASSES)
    y = np.asarray(labels, dtype=int)
    if p.shape[0] != y.shape[0] or y.size == 0:
        raise MetricError("need one probability vector per label")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise MetricError("probability vectors must sum to 1")
    if np.unique(y).size < 2:
        raise MetricError("AUC undefined: all labels identical")
    truth = np.zeros_like(p, dtype=bool)
    truth[np.arange(y.size), y] = True
    return rank_auc(p, truth)


def confusion(predictions, labels) -> np.ndarray:
    """3x3 counts, rows = true class, columns = predicted class."""
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(labels, dtype=int)
    if pred.shape != true.shape:
        raise MetricError("predictions and labels differ in length")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
            raise MetricError("invalid class index")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def weighted_kappa(predictions, labels, weighting: str = "linear") -> float:
    """Cohen's kappa with disagreement weights |i - j| / (C - 1)."""
    if weighting not in ("linear", "quadratic"):
        raise MetricError(f"unknown weighting {weighting!r}")
    if len(predictions) == 0:
        raise MetricError("empty input")
    observed = confusion(predictions, labels) / float(len(predictions))
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(N_CLASSES)
    w = np.abs(idx[:, None] - idx[None, :]) / (N_CLASSES - 1)
    if weighting == "quadratic":
        w = w ** 2
    denom = (w * expected).sum()
    if denom == 0.0:
        # both raters put everything in one shared class
        return 1.0
    return float(1.0 - (w * observed).sum() / denom)


@dataclass
class MetricBundle:
    auc: float
    kappa: float
    confusion: np.ndarray
    reader: str = "reader1"

    def to_dict(self) -> dict:
        return {"reader": self.reader, "micro_auc": self.auc, "kappa": self.kappa,
                "confusion": self.confusion.tolist()}


def evaluate_probs(probs: np.ndarray, labels: Sequence[int], reader: str = "reader1") -> MetricBundle:
    pred = np.argmax(probs, axis=1)
    return MetricBundle(micro_auc(probs, labels), weighted_kappa(pred, labels), confusion(pred, labels), reader)


@dataclass
class DetectionCurve:
    """Fraction of the ranked list inspected vs fraction of flagged items found."""

    fractions: np.ndarray
    recall: np.ndarray
    ranked_ids: List = field(default_factory=list)

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.recall = np.asarray(self.recall, dtype=np.float64)
        if self.fractions.shape != self.recall.shape:
            raise MetricError("curve coordinates differ in length")
        if np.any(np.diff(self.fractions) < 0) or np.any(np.diff(self.recall) < 0):
            raise MetricError("detection curve must be monotone")

    def area(self) -> float:
        """Step-curve area: mean recall over the inspected positions."""
        if self.fractions.size == 0:
            return 0.0
        widths = np.diff(np.concatenate([[0.0], self.fractions]))
        return float(widths @ self.recall)

    def recall_at(self, fraction: float) -> float:
        return recall_at_fraction(self, fraction)


def random_curve_area(n: int) -> float:
    """Expected step-curve area of a uniformly random ranking of ``n`` items."""
    return (n + 1) / (2.0 * n)


def recall_at_fraction(curve: DetectionCurve, fraction: float) -> float:
    """Recall at the largest inspected fraction not exceeding ``fraction``."""
    if not fraction > 0:
        raise MetricError("fraction must be positive")
    idx = np.searchsorted(curve.fractions, fraction + 1e-12, side="right") - 1
    if idx < 0:
        return 0.0
    return float(curve.recall[idx])
