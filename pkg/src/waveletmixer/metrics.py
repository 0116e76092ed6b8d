"""Classification and regression metrics with explicit undefined handling.

PR-AUC is average precision (step integration over ranked positives);
ROC-AUC is the rank-sum probability that a positive outranks a negative
with ties counted half. Degenerate inputs signal ``UndefinedMetricError``
or carry ``None`` in reports instead of propagating NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DOMINANT_ZONES = {
    1: "Evergreen Needleleaf Forests",
    5: "Mixed Forests",
    8: "Woody Savannas",
    9: "Savannas",
    10: "Grasslands",
}


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds, labels, threshold=0.5) -> ConfusionCounts:
    """Threshold probabilities (p >= threshold counts positive) and tally."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: preds {p.shape} vs labels {y.shape}")
    pos = p >= threshold
    truth = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pos & truth)),
        fp=int(np.sum(pos & ~truth)),
        tn=int(np.sum(~pos & ~truth)),
        fn=int(np.sum(~pos & truth)),
    )


def precision_recall_f1_fpr(counts: ConfusionCounts):
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    fpr = counts.fp / (counts.fp + counts.tn) if counts.fp + counts.tn else 0.0
    return precision, recall, f1, fpr


def pr_auc(scores, labels) -> float:
    """Average precision: sum of precision-at-rank over positives / n_pos.

    Descending-score order with tied scores grouped into one block, so the
    result is invariant to ordering within ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("length mismatch between scores and labels")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = (y[order] == 1).astype(np.float64)
    # block boundaries where the score changes
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    ends = np.append(boundaries, len(s_sorted) - 1)
    cum_tp = np.cumsum(y_sorted)
    total = 0.0
    prev_tp = 0.0
    for end in ends:
        rank = end + 1  # predictions taken so far
        tp = cum_tp[end]
        precision = tp / rank
        total += precision * (tp - prev_tp)
        prev_tp = tp
    return total / n_pos


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) with ties counted 1/2, via rank sums."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("length mismatch between scores and labels")
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC undefined for single-class labels")
    ranks = _average_ranks(s)
    pos_rank_sum = float(np.sum(ranks[np.asarray(y) == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def regression_errors(probs, labels):
    """(MSE, MAE) between probabilities and 0/1 labels."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("length mismatch between probs and labels")
    d = p - y
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def bundle(probs, labels, threshold=0.5) -> dict:
    """All metrics for one set of predictions; undefined AUCs become None."""
    counts = confusion(probs, labels, threshold)
    precision, recall, f1, fpr = precision_recall_f1_fpr(counts)
    mse, mae = regression_errors(probs, labels)
    out = {
        "n": counts.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fpr": fpr,
        "mse": mse,
        "mae": mae,
    }
    try:
        out["pr_auc"] = pr_auc(probs, labels)
    except UndefinedMetricError:
        out["pr_auc"] = None
    try:
        out["roc_auc"] = roc_auc(probs, labels)
    except UndefinedMetricError:
        out["roc_auc"] = None
    return out


def stratified_report(probs, labels, zones, years, threshold=0.5) -> dict:
    """Metric bundles overall and per (zone group, year) cell.

    Zones collapse to the five dominant land-cover classes plus "Others";
    cells without samples are omitted, degenerate metrics stay None.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    z = np.asarray(zones)
    yr = np.asarray(years)
    if not (len(p) == len(y) == len(z) == len(yr)):
        raise ValueError("probs, labels, zones, years must have equal length")
    groups = np.array([DOMINANT_ZONES.get(int(c), "Others") for c in z])
    report = {"overall": bundle(p, y, threshold), "cells": []}
    for group in list(DOMINANT_ZONES.values()) + ["Others"]:
        gmask = groups == group
        if not np.any(gmask):
            continue
        for year in sorted(set(yr[gmask].tolist())):
            mask = gmask & (yr == year)
            cell = bundle(p[mask], y[mask], threshold)
            cell["zone"] = group
            cell["year"] = int(year)
            report["cells"].append(cell)
    return report
