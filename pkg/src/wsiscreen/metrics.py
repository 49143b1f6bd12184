"""Segmentation and screening metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, predicted, truth) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool).ravel()
        t = np.asarray(truth, dtype=bool).ravel()
        if p.shape != t.shape:
            raise DimensionError(f"{p.size} predictions for {t.size} labels")
        return cls(
            tp=int(np.sum(p & t)),
            fp=int(np.sum(p & ~t)),
            tn=int(np.sum(~p & ~t)),
            fn=int(np.sum(~p & t)),
        )


def dice(pred, truth) -> float:
    """2TP / (2TP + FP + FN) over pixels; two empty masks score 1.0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"dice: mask shapes {pred.shape} and {truth.shape} differ")
    tp = int(np.sum(pred & truth))
    denom = 2 * tp + int(np.sum(pred & ~truth)) + int(np.sum(~pred & truth))
    if denom == 0:
        return 1.0
    return 2 * tp / denom


class Rates(NamedTuple):
    sensitivity: float | None
    specificity: float | None


def sens_spec(counts: ConfusionCounts) -> Rates:
    """Sensitivity and specificity; a rate with an empty denominator is None."""
    sens = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    spec = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else None
    return Rates(sens, spec)


def _split(scores, labels):
    if labels is None:
        pairs = list(scores)
        s = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([bool(p[1]) for p in pairs])
    else:
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    if y.all() or not y.any():
        raise ValidationError("AUC needs both positive and negative examples")
    return s, y


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney statistic with tied pairs counted as one half."""
    s, y = _split(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    # doubled average ranks are integers, so the statistic is exact
    twice_ranks = np.round(2 * rankdata(s)).astype(np.int64)
    u2 = int(twice_ranks[y].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def pr_auc(scores, labels=None) -> float:
    """Average precision: step interpolation over unique thresholds, descending."""
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tp[ends] / (tp[ends] + fp[ends])
    recall = tp[ends] / tp[-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def auc(scores, labels=None, kind: str = "roc") -> float:
    if kind == "roc":
        return roc_auc(scores, labels)
    if kind == "pr":
        return pr_auc(scores, labels)
    raise ValidationError(f"unknown AUC kind {kind!r}")


def screening_report(
    slide_probs, slide_labels, threshold: float, dice_scores=()
) -> dict:
    """Report JSON fields for a set of screened slides."""
    from .models import decide

    probs = np.asarray(slide_probs, dtype=np.float64)
    labels = np.asarray(slide_labels, dtype=bool)
    decisions = np.array([decide(p, threshold) == "positive" for p in probs], dtype=bool)
    rates = sens_spec(ConfusionCounts.from_labels(decisions, labels))
    both = labels.any() and not labels.all()
    d = np.asarray(list(dice_scores), dtype=np.float64)
    return {
        "dice_mean": float(d.mean()) if d.size else None,
        "dice_std": float(d.std()) if d.size else None,
        "sensitivity": rates.sensitivity,
        "specificity": rates.specificity,
        "roc_auc": roc_auc(probs, labels) if both else None,
        "pr_auc": pr_auc(probs, labels) if both else None,
        "threshold": threshold,
        "n_pos": int(labels.sum()),
        "n_neg": int((~labels).sum()),
    }
