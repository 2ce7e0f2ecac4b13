"""AUROC and F1-threshold metrics over labeled scores.

AUROC is computed with the rank formulation (average ranks on ties): the
probability that a random abnormal sample outscores a random normal one,
ties counted half. Tests cross-check it against both an O(n^2)
pair-counting oracle and trapezoidal ROC integration.
"""

import numpy as np
from scipy import stats

from .errors import LengthMismatch, ShapeMismatch, SingleClass


def _labeled(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise LengthMismatch(
            f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    if not np.isin(y, (0, 1)).all():
        raise SingleClass("labels must be 0 (normal) or 1 (abnormal)")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise SingleClass("need both classes present")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with tie-averaged ranks."""
    s, y = _labeled(scores, labels)
    ranks = stats.rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over the pooled pixels of all (map, mask) pairs."""
    maps = list(maps)
    masks = list(masks)
    if len(maps) != len(masks):
        raise LengthMismatch(
            f"{len(maps)} maps vs {len(masks)} masks")
    flat_scores = []
    flat_labels = []
    for i, (m, g) in enumerate(zip(maps, masks)):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ShapeMismatch(
                f"sample {i}: map {m.shape} vs mask {g.shape}")
        flat_scores.append(m.ravel())
        flat_labels.append((g.ravel() > 0.5).astype(np.int64))
    return auroc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def f1_optimal_threshold(scores, labels):
    """Threshold over observed scores maximizing F1 of (score >= t).

    Scanned in ascending score order with strictly-better updates, so
    among equally good thresholds the lowest is returned.
    """
    s, y = _labeled(scores, labels)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    n_pos = int(y.sum())

    # predictions at threshold s_sorted[i] cover the suffix starting at the
    # first occurrence of that value
    tp_suffix = np.cumsum(y_sorted[::-1])[::-1]  # positives with score >= s_i
    count_suffix = np.arange(y.size, 0, -1)  # samples with score >= s_i

    best_f1 = -1.0
    best_thr = float(s_sorted[0])
    for i in range(y.size):
        if i > 0 and s_sorted[i] == s_sorted[i - 1]:
            continue  # same threshold as previous point
        tp = int(tp_suffix[i])
        predicted = int(count_suffix[i])
        fp = predicted - tp
        fn = n_pos - tp
        denom = 2 * tp + fp + fn
        f1 = (2.0 * tp / denom) if denom else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best_thr = float(s_sorted[i])
    return best_thr, float(best_f1)
