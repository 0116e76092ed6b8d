"""Optimization loop: min-max normalization, cross-entropy, Adam,
early stopping, and metric-keyed checkpoint retention.

Normalization statistics come from the training split only and are applied
unchanged to evaluation splits (values may leave [0,1]; no clipping). The
land-cover channel is exempt: it carries categorical codes consumed by the
embedding lookup.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as T
from .data import Dataset, chronological_split
from .model import ModelConfig, ChannelSchema, WaveletMixer, calendar_marks
from .tensor import Tensor

CHECKPOINT_METRICS = ("f1", "recall", "pr_auc", "mae", "mse")
LOWER_IS_BETTER = {"mae", "mse"}

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "precision", "recall", "f1",
               "pr_auc", "roc_auc", "fpr", "mse", "mae")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    precision: str = "f32"           # f32 | f64
    monitor: str = "f1"              # early-stopping metric on the validation split
    checkpoint_metrics: tuple = CHECKPOINT_METRICS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class NormalizationStats:
    """Per-channel min/max from the training split; landcover passes through."""

    mins: np.ndarray
    maxs: np.ndarray
    skip_channel: int | None

    @staticmethod
    def fit(windows: np.ndarray, skip_channel=None) -> "NormalizationStats":
        if windows.shape[0] == 0:
            raise ValueError("cannot fit normalization on an empty training split")
        mins = windows.min(axis=(0, 1))
        maxs = windows.max(axis=(0, 1))
        return NormalizationStats(mins=mins, maxs=maxs, skip_channel=skip_channel)

    def apply(self, windows: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (windows - self.mins) / safe
        out = np.where(span > 0, out, 0.0)  # constant channels map to 0
        if self.skip_channel is not None:
            out[..., self.skip_channel] = windows[..., self.skip_channel]
        return out.astype(windows.dtype)

    def to_dict(self):
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(),
                "skip_channel": self.skip_channel}

    @staticmethod
    def from_dict(d):
        return NormalizationStats(
            mins=np.asarray(d["mins"], dtype=np.float64),
            maxs=np.asarray(d["maxs"], dtype=np.float64),
            skip_channel=d.get("skip_channel"),
        )


def minmax_fit_apply(train_windows, other_windows, skip_channel=None):
    """Fit on train, apply to train plus each evaluation split."""
    stats = NormalizationStats.fit(train_windows, skip_channel=skip_channel)
    return stats.apply(train_windows), [stats.apply(w) for w in other_windows], stats


def binary_cross_entropy(probs: Tensor, labels: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps]."""
    p = T.clamp(probs, eps, 1.0 - eps)
    y = Tensor(np.asarray(labels, dtype=p.dtype))
    one = Tensor(np.ones_like(y.data))
    ll = T.add(T.mul(y, T.log(p)), T.mul(T.sub(one, y), T.log(T.sub(one, p))))
    return T.scale(T.tmean(ll), -1.0)


class AdamState:
    """Per-parameter first/second moments with shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.step = 0


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update; missing grads count as zero."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - beta1 ** t
    correct2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    checkpoints: dict                 # metric -> {"params", "epoch", "value"}
    log: list                         # one dict per epoch, LOG_COLUMNS keys
    stats: NormalizationStats
    stopped_early: bool
    final_model: WaveletMixer

    def log_csv(self, seed=None) -> str:
        buf = io.StringIO()
        if seed is not None:
            buf.write(f"# seed={seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.log:
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return v


def evaluate_probs(model: WaveletMixer, windows, marks, batch_size=256) -> np.ndarray:
    """Inference over a split in batches; no dropout, no tape."""
    out = np.empty(windows.shape[0], dtype=np.float64)
    for lo in range(0, windows.shape[0], batch_size):
        hi = min(lo + batch_size, windows.shape[0])
        out[lo:hi] = model.predict_proba(windows[lo:hi], marks[lo:hi])
    return out


def _epoch_metrics(probs, labels):
    b = M.bundle(probs, labels)
    val_loss = float(np.mean(
        -(labels * np.log(np.clip(probs, 1e-7, 1 - 1e-7))
          + (1 - labels) * np.log(np.clip(1 - probs, 1e-7, 1 - 1e-7)))))
    b["val_loss"] = val_loss
    return b


def _is_improvement(metric, value, best):
    if value is None:
        return False
    if best is None:
        return True
    if metric in LOWER_IS_BETTER:
        return value < best
    return value > best


def train(model_config: ModelConfig, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Train on the chronological splits of ``dataset``.

    Tracks the best snapshot per checkpoint metric over the validation
    split; stops when the monitored metric has not improved for
    ``patience`` consecutive epochs.
    """
    train_idx, val_idx, _ = chronological_split(
        dataset.dates, dataset.manifest.split_boundaries)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError(
            f"empty split: train={len(train_idx)}, val={len(val_idx)}; "
            "check split boundaries against the dataset dates")
    train_ds = dataset.subset(train_idx)
    val_ds = dataset.subset(val_idx)

    lc_idx = dataset.manifest.channel_names.index(
        next(n for n, r in dataset.manifest.channel_roles.items() if r == "landcover"))
    train_w, (val_w,), stats = minmax_fit_apply(
        train_ds.windows.astype(np.float64), [val_ds.windows.astype(np.float64)],
        skip_channel=lc_idx)
    dtype = config.dtype
    train_w = train_w.astype(dtype)
    val_w = val_w.astype(dtype)

    t_len = dataset.manifest.window_len
    train_marks = calendar_marks(train_ds.dates, t_len).astype(dtype)
    val_marks = calendar_marks(val_ds.dates, t_len).astype(dtype)
    train_y = train_ds.labels.astype(np.float64)
    val_y = val_ds.labels.astype(np.float64)

    seed_seq = np.random.SeedSequence(config.seed)
    init_rng, shuffle_rng, dropout_rng = [np.random.default_rng(s) for s in seed_seq.spawn(3)]

    schema = ChannelSchema.build(
        dataset.manifest.channel_names, dataset.manifest.channel_roles,
        dataset.manifest.fire_channel, model_config)
    model = WaveletMixer(model_config, schema, t_len, rng=init_rng, dtype=dtype)
    params = [p for _, p in model.named_parameters()]
    state = AdamState(params)

    checkpoints = {}
    log = []
    best_monitor = None
    stale = 0
    stopped_early = False
    n_train = train_w.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        total_loss = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            for p in params:
                p.zero_grad()
            _, probs = model.forward(train_w[idx], train_marks[idx],
                                     training=True, rng=dropout_rng)
            loss = binary_cross_entropy(probs, train_y[idx])
            loss.backward()
            adam_step(params, state, config.learning_rate)
            total_loss += loss.data.item() * len(idx)
        train_loss = total_loss / n_train

        val_probs = evaluate_probs(model, val_w, val_marks)
        em = _epoch_metrics(val_probs, val_y)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": em["val_loss"],
               "precision": em["precision"], "recall": em["recall"], "f1": em["f1"],
               "pr_auc": em["pr_auc"], "roc_auc": em["roc_auc"], "fpr": em["fpr"],
               "mse": em["mse"], "mae": em["mae"]}
        log.append(row)

        for metric in config.checkpoint_metrics:
            value = em.get(metric)
            prev = checkpoints.get(metric)
            if _is_improvement(metric, value, prev["value"] if prev else None):
                checkpoints[metric] = {
                    "params": model.snapshot(), "epoch": epoch, "value": value}

        monitored = em.get(config.monitor)
        if _is_improvement(config.monitor, monitored, best_monitor):
            best_monitor = monitored
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break

    return TrainResult(checkpoints=checkpoints, log=log, stats=stats,
                       stopped_early=stopped_early, final_model=model)
