"""Ranking metrics for hazard recovery.

AUC is the Mann-Whitney statistic (ties count one half), best_f1 scans
the distinct scores as thresholds with positives defined by
score >= threshold, and roc_points traces the staircase whose trapezoid
area equals the AUC. All metrics raise UndefinedMetricError when the
labels are single-class.
"""

import csv
import io

import numpy as np

from .exceptions import UndefinedMetricError, ValidationError
from .util import atomic_write_text, format_float


def _check_inputs(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be matching 1-d arrays")
    if not np.isfinite(scores).all():
        raise ValidationError("scores must be finite")
    labels = labels.astype(np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"metric undefined: {n_pos} positive and {n_neg} negative labels"
        )
    return scores, labels, n_pos, n_neg


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + P(equal) / 2."""
    scores, labels, n_pos, n_neg = _check_inputs(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # Midranks: average rank within each tied block, 1-based.
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels[order] == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def best_f1(scores, labels):
    """Max F1 over thresholds; positive means score >= threshold.

    Returns (f1, threshold) with the smallest maximizing threshold.
    """
    scores, labels, n_pos, _ = _check_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp_cum = np.cumsum(labels[order])
    # Candidate thresholds: each distinct score, classifying everything at
    # or above it positive; block ends mark complete threshold sets.
    is_block_end = np.ones(scores.size, dtype=bool)
    is_block_end[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    idx = np.flatnonzero(is_block_end)
    tp = tp_cum[idx].astype(float)
    pred_pos = idx + 1.0
    f1 = 2.0 * tp / (pred_pos + n_pos)
    best_val = float(f1.max())
    # Thresholds decrease along the scan, so the last maximizer is the
    # smallest threshold achieving the best F1.
    best = int(np.flatnonzero(f1 == best_val)[-1])
    return best_val, float(sorted_scores[idx[best]])


def roc_points(scores, labels):
    """ROC staircase (fpr, tpr) from (0, 0) to (1, 1), one point per
    distinct score, suitable for trapezoidal integration."""
    scores, labels, n_pos, n_neg = _check_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp_cum = np.cumsum(labels[order]).astype(float)
    fp_cum = np.cumsum(1 - labels[order]).astype(float)
    is_block_end = np.ones(scores.size, dtype=bool)
    is_block_end[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    idx = np.flatnonzero(is_block_end)
    fpr = np.concatenate([[0.0], fp_cum[idx] / n_neg])
    tpr = np.concatenate([[0.0], tp_cum[idx] / n_pos])
    return fpr, tpr


def hazard_metrics(posterior_q, truth_x, active=None):
    """Per-hazard AUC and best F1 over the scored locations.

    Rows where active is False for a hazard are excluded from that
    hazard's metric. Returns a list of dicts ordered ls, lf, bd.
    """
    posterior_q = np.asarray(posterior_q, dtype=float)
    truth_x = np.asarray(truth_x)
    if posterior_q.shape != truth_x.shape or posterior_q.shape[1] != 3:
        raise ValidationError("posterior and truth must both be (n, 3)")
    out = []
    for j, hazard in enumerate(("ls", "lf", "bd")):
        mask = np.ones(posterior_q.shape[0], dtype=bool)
        if active is not None:
            mask = np.asarray(active, dtype=bool)[:, j]
        scores = posterior_q[mask, j]
        labels = truth_x[mask, j]
        a = auc(scores, labels)
        f1, threshold = best_f1(scores, labels)
        out.append({
            "hazard": hazard,
            "auc": a,
            "f1": f1,
            "threshold": threshold,
            "n_pos": int(labels.sum()),
            "n_neg": int(labels.size - labels.sum()),
        })
    return out


def write_metrics(rows, path=None):
    """Metrics rows as CSV; returns the text when path is None."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["hazard", "auc", "f1", "threshold", "n_pos", "n_neg"])
    for row in rows:
        writer.writerow([
            row["hazard"], format_float(row["auc"]), format_float(row["f1"]),
            format_float(row["threshold"]), row["n_pos"], row["n_neg"],
        ])
    text = buf.getvalue()
    if path is None:
        return text
    atomic_write_text(path, text)
    return None


def write_roc(fpr, tpr, path=None):
    """ROC staircase as CSV; returns the text when path is None."""
    fpr = np.asarray(fpr, dtype=float)
    tpr = np.asarray(tpr, dtype=float)
    if fpr.shape != tpr.shape or fpr.ndim != 1:
        raise ValidationError("fpr and tpr must be matching 1-d arrays")
    lines = ["fpr,tpr"]
    for f, t in zip(fpr, tpr):
        lines.append(f"{format_float(f)},{format_float(t)}")
    text = "\n".join(lines) + "\n"
    if path is None:
        return text
    atomic_write_text(path, text)
    return None
