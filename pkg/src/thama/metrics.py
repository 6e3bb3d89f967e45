"""Detection metrics with fake (label 1) as the positive class.

For a threshold t, a record is called fake when its score is >= t:

    FPR(t) = #{bonafide with score >= t} / #bonafide
    FNR(t) = #{fake with score < t} / #fake

The EER sweep visits -inf, every distinct score, and +inf, picks the first
threshold (in increasing order) minimizing |FPR - FNR|, and reports
(FPR + FNR) / 2 there, in percent.
"""

from __future__ import annotations

import numpy as np

from thama.errors import DataFormatError


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise DataFormatError("labels must be 0 (bonafide) or 1 (fake)")
    fake = np.sort(scores[labels == 1])
    bona = np.sort(scores[labels == 0])
    if len(fake) == 0 or len(bona) == 0:
        raise ValueError("EER/ROC need both bonafide and fake records")
    return scores, fake, bona


def error_rates(scores, labels, thresholds):
    """FPR and FNR at each threshold (>= semantics)."""
    _, fake, bona = _split(scores, labels)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    false_pos = len(bona) - np.searchsorted(bona, thresholds, side="left")
    false_neg = np.searchsorted(fake, thresholds, side="left")
    return false_pos / len(bona), false_neg / len(fake)


def compute_eer(scores, labels) -> tuple[float, float]:
    """Return ``(eer_percent, threshold)``."""
    scores, _, _ = _split(scores, labels)
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    fpr, fnr = error_rates(scores, labels, thresholds)
    i = int(np.argmin(np.abs(fpr - fnr)))
    return float((fpr[i] + fnr[i]) / 2 * 100), float(thresholds[i])


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs from (0, 0) to (1, 1), nondecreasing in both."""
    scores, _, _ = _split(scores, labels)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    fpr, fnr = error_rates(scores, labels, thresholds)
    return [(float(a), float(1.0 - b)) for a, b in zip(fpr, fnr)]


def roc_auc(points) -> float:
    pts = np.asarray(points)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))
