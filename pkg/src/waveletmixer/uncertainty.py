"""Entropy decomposition over checkpoint ensembles and discard analysis.

All entropies are in nats with 0*ln(0) := 0. For each sample the total
predictive entropy (of the member-averaged distribution) splits exactly
into the mean member entropy (aleatoric) plus the remainder (epistemic,
the mutual information between prediction and member identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import UndefinedMetricError

MEASURES = ("total", "aleatoric", "epistemic")

DEFAULT_COVERAGE_GRID = tuple(np.round(np.arange(20, 0, -1) * 0.05, 2))  # 1.00 .. 0.05


def entropy(p) -> float:
    """Shannon entropy in nats of one probability vector."""
    v = np.asarray(p, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {v.sum()!r}")
    nz = v[v > 0]
    return float(-np.sum(nz * np.log(nz)))


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy with 0 ln 0 = 0; p has shape [..., n_classes]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class EnsembleDistribution:
    """Per-sample member probabilities and their entropy decomposition.

    member_probs: [M, n, 2]; mean_probs: [n, 2]; h_pred/h_data/mi: [n].
    """

    member_probs: np.ndarray
    mean_probs: np.ndarray
    h_pred: np.ndarray
    h_data: np.ndarray
    mi: np.ndarray

    @property
    def n_members(self):
        return self.member_probs.shape[0]

    def measure(self, name: str) -> np.ndarray:
        if name == "total":
            return self.h_pred
        if name == "aleatoric":
            return self.h_data
        if name == "epistemic":
            return self.mi
        raise ValueError(f"unknown uncertainty measure {name!r}; choose from {MEASURES}")


def from_member_probs(fire_probs: np.ndarray) -> EnsembleDistribution:
    """Build the decomposition from [M, n] per-member fire probabilities."""
    fp = np.atleast_2d(np.asarray(fire_probs, dtype=np.float64))
    if fp.ndim != 2:
        raise ValueError("expected member fire probabilities of shape [M, n]")
    if fp.shape[0] < 1:
        raise ValueError("ensemble needs at least one member")
    member = np.stack([1.0 - fp, fp], axis=-1)   # [M, n, 2]
    mean = member.mean(axis=0)                    # [n, 2]
    h_pred = _entropy_rows(mean)
    h_data = _entropy_rows(member).mean(axis=0)
    mi = h_pred - h_data
    return EnsembleDistribution(member_probs=member, mean_probs=mean,
                                h_pred=h_pred, h_data=h_data, mi=mi)


def ensemble_predict(models, windows, marks, batch_size=256) -> EnsembleDistribution:
    """Average class probabilities over checkpoint models.

    ``models`` is a non-empty sequence of objects exposing
    ``predict_proba(windows, marks) -> [n] fire probability``.
    """
    models = list(models)
    if not models:
        raise ValueError("ensemble_predict needs at least one checkpoint model")
    n = windows.shape[0]
    fp = np.empty((len(models), n), dtype=np.float64)
    for m_i, model in enumerate(models):
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            fp[m_i, lo:hi] = model.predict_proba(windows[lo:hi], marks[lo:hi])
    return from_member_probs(fp)


def decompose(dist: EnsembleDistribution):
    """(total, aleatoric, epistemic) arrays; identity holds by construction."""
    return dist.h_pred, dist.h_data, dist.mi


@dataclass
class SelectiveCurve:
    measure: str
    points: list     # dicts: coverage, n_retained, risk, mse, mae, bce
    notices: list


def discard_test(dist: EnsembleDistribution, labels, measure="total",
                 grid=DEFAULT_COVERAGE_GRID, threshold=0.5) -> SelectiveCurve:
    """Risk/MSE/MAE/BCE over the retained subset as coverage shrinks.

    At each coverage c the floor(c*n) samples with lowest uncertainty are
    retained (ties broken by sample index); grid points retaining nothing
    are skipped with a notice. Duplicate retained-set sizes from a coarse
    grid are collapsed so coverage strictly decreases.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = len(y)
    if n < 1:
        raise ValueError("discard test needs at least one sample")
    if dist.mean_probs.shape[0] != n:
        raise ValueError("labels and distribution disagree on sample count")
    u = dist.measure(measure)
    order = np.argsort(u, kind="stable")  # stable: ties by sample index
    probs = dist.mean_probs[:, 1]
    points, notices = [], []
    seen_sizes = set()
    for c in grid:
        if not 0.0 < c <= 1.0:
            notices.append(f"coverage {c} outside (0,1]; skipped")
            continue
        k = int(np.floor(c * n + 1e-9))  # guard against float fuzz like 0.05*20
        if k == 0:
            notices.append(f"coverage {c} retains no samples; skipped")
            continue
        if k in seen_sizes:
            continue
        seen_sizes.add(k)
        keep = order[:k]
        pk, yk = probs[keep], y[keep]
        preds = (pk >= threshold).astype(np.float64)
        risk = float(np.mean(preds != yk))
        mse = float(np.mean((pk - yk) ** 2))
        mae = float(np.mean(np.abs(pk - yk)))
        clipped = np.clip(pk, 1e-7, 1 - 1e-7)
        bce = float(np.mean(-(yk * np.log(clipped) + (1 - yk) * np.log(1 - clipped))))
        points.append({"coverage": k / n, "n_retained": k, "risk": risk,
                       "mse": mse, "mae": mae, "bce": bce})
    return SelectiveCurve(measure=measure, points=points, notices=notices)


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return None
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def _ranks(values):
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def uncertainty_correlations(dist: EnsembleDistribution):
    """Pearson and Spearman 3x3 matrices among total/aleatoric/epistemic.

    Zero-variance components yield None entries plus a notice; diagonals
    are 1 by convention whenever the component varies.
    """
    comps = {m: dist.measure(m) for m in MEASURES}
    if len(dist.h_pred) < 3:
        raise ValueError("correlations need at least 3 samples")
    notices = []
    pearson = {}
    spearman = {}
    for a in MEASURES:
        for b in MEASURES:
            p = _pearson(comps[a], comps[b])
            s = _pearson(_ranks(comps[a]), _ranks(comps[b]))
            if p is None or s is None:
                notices.append(f"correlation undefined for ({a}, {b}): zero variance")
            pearson[(a, b)] = p
            spearman[(a, b)] = s
    return {"pearson": pearson, "spearman": spearman, "notices": notices}


def outcome_stratified_uncertainty(dist: EnsembleDistribution, labels, threshold=0.5):
    """Mean uncertainty per confusion cell (TP/FP/TN/FN) per component.

    Empty cells are absent from the result rather than reported as zero.
    """
    y = np.asarray(labels)
    preds = (dist.mean_probs[:, 1] >= threshold).astype(int)
    cells = {
        "TP": (preds == 1) & (y == 1),
        "FP": (preds == 1) & (y == 0),
        "TN": (preds == 0) & (y == 0),
        "FN": (preds == 0) & (y == 1),
    }
    out = {}
    for cell, mask in cells.items():
        if not np.any(mask):
            continue
        out[cell] = {m: float(dist.measure(m)[mask].mean()) for m in MEASURES}
        out[cell]["n"] = int(mask.sum())
    return out
