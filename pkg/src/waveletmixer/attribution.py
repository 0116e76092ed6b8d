"""Shapley attribution of the fire probability to driver channels.

Feature granularity is one group per driver channel (all T timesteps
toggled together). Absent groups are replaced by background-sample values
and the value function is the background-averaged model output, so exact
enumeration satisfies efficiency: sum(phi) = f(x) - mean_bg f. The
permutation-sampling estimator is unbiased for the same quantity and the
exact variant doubles as its oracle on small d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import calendar_marks

EXACT_GROUP_LIMIT = 12


@dataclass
class AttributionConfig:
    n_permutations: int = 16
    n_background: int = 64
    zone_restricted_background: bool = True
    max_samples_per_zone: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        if self.n_background < 1:
            raise ValueError("background must be non-empty")


def _composite(x, background, present_mask):
    """Background rows with the present feature entries taken from x."""
    return np.where(present_mask, x, background)


def _group_masks(groups, shape):
    masks = []
    for g in groups:
        m = np.zeros(shape, dtype=bool)
        m[g] = True
        masks.append(m)
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        if np.any(union & m):
            raise ValueError("feature groups must be disjoint")
        union |= m
    return masks


def shapley_exact(model_fn, x, background, groups):
    """Classic Shapley values by full coalition enumeration (d <= 12).

    ``model_fn`` maps a stacked array of feature vectors to scalar outputs;
    ``groups`` lists index expressions into ``x`` (one per feature group).
    """
    d = len(groups)
    if d > EXACT_GROUP_LIMIT:
        raise ValueError(
            f"exact enumeration limited to {EXACT_GROUP_LIMIT} groups, got {d}; "
            "use shapley_sampled instead")
    x = np.asarray(x, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape[0] < 1:
        raise ValueError("background must be non-empty")
    masks = _group_masks(groups, x.shape)
    n_bg = bg.shape[0]
    n_coal = 1 << d

    # value of every coalition, vectorized over (coalition, background)
    values = np.empty(n_coal, dtype=np.float64)
    chunk = max(1, int(5e6 // max(1, n_bg * x.size)))
    for lo in range(0, n_coal, chunk):
        hi = min(lo + chunk, n_coal)
        stack = np.empty((hi - lo, n_bg) + x.shape, dtype=np.float64)
        for j, coal in enumerate(range(lo, hi)):
            present = np.zeros(x.shape, dtype=bool)
            for i in range(d):
                if coal >> i & 1:
                    present |= masks[i]
            stack[j] = _composite(x, bg, present)
        out = np.asarray(model_fn(stack.reshape((-1,) + x.shape)), dtype=np.float64)
        values[lo:hi] = out.reshape(hi - lo, n_bg).mean(axis=1)

    sizes = np.array([bin(c).count("1") for c in range(n_coal)])
    # weight of adding to a coalition of size s: s!(d-1-s)!/d!
    weights = np.array([math.factorial(s) * math.factorial(d - 1 - s) / math.factorial(d)
                        for s in range(d)])
    coals = np.arange(n_coal)
    phi = np.empty(d, dtype=np.float64)
    for i in range(d):
        without = coals[(coals >> i) & 1 == 0]
        phi[i] = np.sum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def shapley_sampled(model_fn, x, background, groups, n_permutations, seed=0):
    """Permutation-sampling estimate of the same values, any d.

    Returns (phi, standard_errors); deterministic given the seed.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    d = len(groups)
    x = np.asarray(x, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape[0] < 1:
        raise ValueError("background must be non-empty")
    masks = _group_masks(groups, x.shape)
    rng = np.random.default_rng(seed)
    n_bg = bg.shape[0]
    contributions = np.zeros((n_permutations, d), dtype=np.float64)
    for p in range(n_permutations):
        order = rng.permutation(d)
        # prefix coalitions: empty, then cumulative along the permutation
        stack = np.empty((d + 1, n_bg) + x.shape, dtype=np.float64)
        present = np.zeros(x.shape, dtype=bool)
        stack[0] = _composite(x, bg, present)
        for j, g in enumerate(order):
            present = present | masks[g]
            stack[j + 1] = _composite(x, bg, present)
        out = np.asarray(model_fn(stack.reshape((-1,) + x.shape)), dtype=np.float64)
        values = out.reshape(d + 1, n_bg).mean(axis=1)
        contributions[p, order] = np.diff(values)
    phi = contributions.mean(axis=0)
    if n_permutations > 1:
        se = contributions.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        se = np.full(d, np.nan)
    return phi, se


def zoned_aggregate(phis, zones, years, channel_names):
    """Signed mean and mean |phi| per channel within each (zone, year).

    Returns cells keyed (zone, year); each carries per-channel stats ranked
    by mean absolute contribution (rank 1 = largest).
    """
    phis = np.asarray(phis, dtype=np.float64)
    zones = np.asarray(zones)
    years = np.asarray(years)
    if not (len(phis) == len(zones) == len(years)):
        raise ValueError("phis, zones, years must have equal length")
    cells = {}
    for zone in sorted(set(zones.tolist())):
        for year in sorted(set(years[zones == zone].tolist())):
            mask = (zones == zone) & (years == year)
            block = phis[mask]
            signed = block.mean(axis=0)
            magnitude = np.abs(block).mean(axis=0)
            order = np.argsort(-magnitude, kind="stable")
            ranks = np.empty(len(channel_names), dtype=int)
            ranks[order] = np.arange(1, len(channel_names) + 1)
            cells[(int(zone), int(year))] = {
                "n_samples": int(mask.sum()),
                "channels": [
                    {"channel": channel_names[i],
                     "signed_mean_shap": float(signed[i]),
                     "mean_abs_shap": float(magnitude[i]),
                     "rank": int(ranks[i])}
                    for i in range(len(channel_names))
                ],
            }
    return cells


def make_window_model_fn(model, stats, target_date, window_len):
    """Wrap the full inference path as f(raw windows [k,T,N]) -> fire probability.

    Normalization and calendar marks for the explained sample's target date
    are applied inside, so attribution operates on raw driver windows.
    """
    marks_row = calendar_marks([target_date], window_len)[0]

    def fn(windows):
        w = stats.apply(np.asarray(windows, dtype=np.float64))
        marks = np.broadcast_to(marks_row, (w.shape[0],) + marks_row.shape)
        return model.predict_proba(w, np.ascontiguousarray(marks))

    return fn


def zoned_shapley(model, stats, dataset, background_pool, config: AttributionConfig):
    """Sampled per-channel attributions for every sample, zone-aggregated.

    ``background_pool`` indexes into ``dataset`` rows eligible as background
    (typically the training split). Backgrounds are drawn per zone when
    configured and possible, otherwise globally.
    """
    rng = np.random.default_rng(config.seed)
    t_len = dataset.manifest.window_len
    names = dataset.manifest.channel_names
    groups = [(slice(None), i) for i in range(len(names))]  # one group per channel

    pool_zones = dataset.zones[background_pool]
    explained_idx = []
    per_zone_count = {}
    for i in range(len(dataset)):
        z = int(dataset.zones[i])
        if per_zone_count.get(z, 0) >= config.max_samples_per_zone:
            continue
        per_zone_count[z] = per_zone_count.get(z, 0) + 1
        explained_idx.append(i)

    phis = np.zeros((len(explained_idx), len(names)), dtype=np.float64)
    for row, i in enumerate(explained_idx):
        z = int(dataset.zones[i])
        if config.zone_restricted_background:
            candidates = background_pool[pool_zones == z]
            if len(candidates) == 0:
                candidates = background_pool
        else:
            candidates = background_pool
        take = min(config.n_background, len(candidates))
        chosen = rng.choice(candidates, size=take, replace=False)
        bg = dataset.windows[chosen].astype(np.float64)
        fn = make_window_model_fn(model, stats, dataset.dates[i], t_len)
        phi, _ = shapley_sampled(
            fn, dataset.windows[i].astype(np.float64), bg, groups,
            n_permutations=config.n_permutations,
            seed=int(rng.integers(0, 2**31 - 1)))
        phis[row] = phi

    zones = dataset.zones[explained_idx]
    years = np.array([dataset.dates[i].year for i in explained_idx])
    cells = zoned_aggregate(phis, zones, years, names)
    return phis, explained_idx, cells
