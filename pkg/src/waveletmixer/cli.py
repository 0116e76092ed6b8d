"""Command-line surface: one binary, subcommands for each pipeline stage.

Every run owns an output directory, receives a mandatory seed, and writes
a copy of its fully resolved configuration next to its artifacts so the
run can be reproduced from the directory alone.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import attribution as A
from . import metrics as M
from . import uncertainty as U
from .config import ConfigError, load_config, resolved_json
from .data import (
    DEFAULT_SPLITS,
    SamplerConfig,
    SynthConfig,
    chronological_split,
    exclusion_filter,
    read_catalog,
    read_dataset,
    stratified_sample,
    synth_generate,
    write_dataset,
)
from .model import ModelConfig, load_checkpoint, calendar_marks, save_checkpoint
from .training import CHECKPOINT_METRICS, NormalizationStats, TrainConfig, evaluate_probs, train

CHECKPOINT_FILES = {m: f"checkpoint_{m}.wmxc" for m in CHECKPOINT_METRICS}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set or (),
                          seed=args.seed, precision=args.precision)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        handler = COMMANDS[args.command]
        handler(cfg, out, args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    (out / "resolved_config.json").write_text(resolved_json(cfg), encoding="utf-8")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="waveletmixer",
        description="Wavelet-mixer forecasting, uncertainty, and attribution runs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "generate a synthetic dataset"),
        ("sample", "exclusion filtering + stratified sampling over a catalog CSV"),
        ("train", "train and retain per-metric checkpoints"),
        ("eval", "stratified metrics report for one checkpoint"),
        ("predict", "per-sample fire probabilities for one checkpoint"),
        ("uq", "uncertainty decomposition over the checkpoint ensemble"),
        ("discard", "selective-prediction discard curves"),
        ("shap", "zoned Shapley attribution"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory for artifacts")
        p.add_argument("--seed", type=int, help="run seed (mandatory here or in the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        p.add_argument("--precision", choices=["f32", "f64"], help="compute precision")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", help="checkpoint file (default: out dir f1 checkpoint)")
        if name in ("uq", "discard", "shap"):
            p.add_argument("--checkpoint-dir", help="directory holding checkpoint_*.wmxc "
                                                    "(default: the output directory)")
    return parser


# -- shared helpers -----------------------------------------------------


def _write_csv(path, header_comment, columns, rows):
    buf = io.StringIO()
    buf.write(header_comment)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return v


def _dataset_stem(cfg, out: Path):
    stem = cfg["data"]["dataset"]
    return Path(stem) if stem else out / "dataset"


def _load_dataset(cfg, out: Path):
    stem = _dataset_stem(cfg, out)
    if not Path(str(stem) + ".wmxd").exists():
        raise FileNotFoundError(f"dataset payload {stem}.wmxd not found")
    ds = read_dataset(stem)
    if cfg["data"]["splits"]:
        ds.manifest.split_boundaries = dict(cfg["data"]["splits"])
    return ds

def _split_indices(cfg, ds):
    train_idx, val_idx, test_idx = chronological_split(ds.dates, ds.manifest.split_boundaries)
    chosen = {"train": train_idx, "val": val_idx, "test": test_idx}[cfg["data"]["eval_split"]]
    return train_idx, chosen


def _model_config(cfg):
    m = cfg["model"]
    return ModelConfig(
        n_layers=m["n_layers"], d_hidden=m["d_hidden"], n_scales=m["n_scales"],
        patch_len=m["patch_len"], dropout=m["dropout"], lc_embed_dim=m["lc_embed_dim"],
        t_pred=m["t_pred"], disable=tuple(m["disable"]))


def _dtype(cfg):
    return np.float64 if cfg["precision"] == "f64" else np.float32


def _load_single_checkpoint(cfg, out, args):
    path = getattr(args, "checkpoint", None)
    if path is None:
        path = out / cfg["output"]["checkpoint"]
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, header = load_checkpoint(path, dtype=_dtype(cfg))
    stats = NormalizationStats.from_dict(header["normalization"])
    return model, header, stats


def _load_ensemble(cfg, out, args):
    ckpt_dir = Path(getattr(args, "checkpoint_dir", None) or out)
    models, headers = [], []
    for metric in CHECKPOINT_METRICS:
        path = ckpt_dir / CHECKPOINT_FILES[metric]
        if path.exists():
            model, header = load_checkpoint(path, dtype=_dtype(cfg))
            models.append(model)
            headers.append(header)
    if not models:
        raise FileNotFoundError(f"no checkpoint_*.wmxc files under {ckpt_dir}")
    stats = NormalizationStats.from_dict(headers[0]["normalization"])
    return models, headers, stats


def _prepared_split(cfg, ds, idx, stats):
    sub = ds.subset(idx)
    windows = stats.apply(sub.windows.astype(np.float64)).astype(_dtype(cfg))
    marks = calendar_marks(sub.dates, ds.manifest.window_len).astype(_dtype(cfg))
    return sub, windows, marks


# -- subcommands ---------------------------------------------------------


def cmd_synth(cfg, out, args):
    s = cfg["data"]["synth"]
    ds = synth_generate(SynthConfig(
        n_samples=s["n_samples"], window_len=s["window_len"], n_channels=s["n_channels"],
        seed=cfg["seed"], temp_coeff=s["temp_coeff"], dryness_coeff=s["dryness_coeff"],
        precip_coeff=s["precip_coeff"], base_logit=s["base_logit"],
        year_start=s["year_start"], year_end=s["year_end"]))
    if cfg["data"]["splits"]:
        ds.manifest.split_boundaries = dict(cfg["data"]["splits"])
    write_dataset(_dataset_stem(cfg, out), ds)


def cmd_sample(cfg, out, args):
    catalog_path = cfg["data"]["catalog"]
    if not catalog_path:
        raise ConfigError("config key 'data.catalog' is required for the sample subcommand")
    rows = read_catalog(catalog_path)
    s = cfg["data"]["sampler"]
    sampler = SamplerConfig(
        negative_ratio=s["negative_ratio"], exclusion_radius_km=s["exclusion_radius_km"],
        exclusion_days=s["exclusion_days"], per_zone_parity=s["per_zone_parity"],
        seed=cfg["seed"])
    positives = [r for r in rows if r.fire_flag == 1]
    negatives = [r for r in rows if r.fire_flag == 0]
    admitted = exclusion_filter(negatives, positives, sampler)
    selected, report = stratified_sample(positives, admitted, sampler)
    _write_csv(out / "selected.csv", f"# seed={cfg['seed']}\n",
               ("id", "x_km", "y_km", "date", "zone", "fire_flag"),
               [(r.sample_id, r.x_km, r.y_km, r.date.isoformat(), r.zone, r.fire_flag)
                for r in selected])
    report["seed"] = cfg["seed"]
    report["n_candidates"] = len(negatives)
    report["n_admitted"] = len(admitted)
    report["zones"] = {str(k): v for k, v in report["zones"].items()}
    (out / "sampling_report.json").write_text(json.dumps(report, indent=1, sort_keys=True),
                                              encoding="utf-8")


def cmd_train(cfg, out, args):
    ds = _load_dataset(cfg, out)
    t = cfg["train"]
    tcfg = TrainConfig(
        learning_rate=t["learning_rate"], epochs=t["epochs"], patience=t["patience"],
        batch_size=t["batch_size"], seed=cfg["seed"], precision=cfg["precision"],
        monitor=t["monitor"])
    result = train(_model_config(cfg), ds, tcfg)
    (out / "training_log.csv").write_text(result.log_csv(seed=cfg["seed"]), encoding="utf-8")
    for metric, snap in result.checkpoints.items():
        model = result.final_model
        saved_state = model.snapshot()
        model.load_state(snap["params"])
        save_checkpoint(
            out / CHECKPOINT_FILES[metric], model,
            channel_roles=ds.manifest.channel_roles, selected_by=metric,
            normalization=result.stats.to_dict(), seed=cfg["seed"],
            extra={"epoch": snap["epoch"], "value": snap["value"]})
        model.load_state(saved_state)


def cmd_eval(cfg, out, args):
    ds = _load_dataset(cfg, out)
    model, header, stats = _load_single_checkpoint(cfg, out, args)
    _, idx = _split_indices(cfg, ds)
    sub, windows, marks = _prepared_split(cfg, ds, idx, stats)
    probs = evaluate_probs(model, windows, marks)
    report = M.stratified_report(probs, sub.labels, sub.zones, sub.years())
    columns = ("zone", "year", "n", "precision", "recall", "f1", "fpr",
               "pr_auc", "roc_auc", "mse", "mae")
    rows = [("overall", "all") + tuple(report["overall"][c] for c in columns[2:])]
    for cell in report["cells"]:
        rows.append((cell["zone"], cell["year"]) + tuple(cell[c] for c in columns[2:]))
    _write_csv(out / "metrics.csv", f"# seed={cfg['seed']}\n", columns, rows)
    report["seed"] = cfg["seed"]
    report["checkpoint"] = header["selected_by"]
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True),
                                      encoding="utf-8")


def cmd_predict(cfg, out, args):
    ds = _load_dataset(cfg, out)
    model, _, stats = _load_single_checkpoint(cfg, out, args)
    _, idx = _split_indices(cfg, ds)
    sub, windows, marks = _prepared_split(cfg, ds, idx, stats)
    probs = evaluate_probs(model, windows, marks)
    _write_csv(out / "predictions.csv", f"# seed={cfg['seed']}\n",
               ("sample_id", "probability", "label"),
               [(sid, float(p), int(y)) for sid, p, y in zip(sub.sample_ids, probs, sub.labels)])


def _ensemble_distribution(cfg, out, args):
    ds = _load_dataset(cfg, out)
    models, headers, stats = _load_ensemble(cfg, out, args)
    _, idx = _split_indices(cfg, ds)
    sub, windows, marks = _prepared_split(cfg, ds, idx, stats)
    dist = U.ensemble_predict(models, windows, marks)
    return ds, sub, dist


def cmd_uq(cfg, out, args):
    _, sub, dist = _ensemble_distribution(cfg, out, args)
    preds = (dist.mean_probs[:, 1] >= 0.5).astype(int)
    _write_csv(out / "uncertainty.csv", f"# seed={cfg['seed']}\n",
               ("sample_id", "p_mean", "h_pred", "h_data", "mi", "label", "pred"),
               [(sid, float(p), float(hp), float(hd), float(mi), int(y), int(pr))
                for sid, p, hp, hd, mi, y, pr in zip(
                    sub.sample_ids, dist.mean_probs[:, 1], dist.h_pred, dist.h_data,
                    dist.mi, sub.labels, preds)])
    corr = U.uncertainty_correlations(dist)
    corr_json = {
        "seed": cfg["seed"],
        "n_members": dist.n_members,
        "pearson": {f"{a}|{b}": corr["pearson"][(a, b)] for a, b in corr["pearson"]},
        "spearman": {f"{a}|{b}": corr["spearman"][(a, b)] for a, b in corr["spearman"]},
        "notices": corr["notices"],
    }
    (out / "uncertainty_correlations.json").write_text(
        json.dumps(corr_json, indent=1, sort_keys=True), encoding="utf-8")
    cells = U.outcome_stratified_uncertainty(dist, sub.labels)
    (out / "outcome_stratified.json").write_text(
        json.dumps({"seed": cfg["seed"], "cells": cells}, indent=1, sort_keys=True),
        encoding="utf-8")


def cmd_discard(cfg, out, args):
    _, sub, dist = _ensemble_distribution(cfg, out, args)
    grid = tuple(cfg["uncertainty"]["coverage_grid"])
    rows = []
    notices = []
    for measure in cfg["uncertainty"]["measures"]:
        curve = U.discard_test(dist, sub.labels, measure=measure, grid=grid)
        for p in curve.points:
            rows.append((measure, p["coverage"], p["risk"], p["mse"], p["mae"], p["bce"]))
        notices.extend(f"{measure}: {n}" for n in curve.notices)
    _write_csv(out / "discard_curves.csv", f"# seed={cfg['seed']}\n",
               ("measure", "coverage", "risk", "mse", "mae", "bce"), rows)
    if notices:
        (out / "discard_notices.json").write_text(json.dumps(notices, indent=1),
                                                  encoding="utf-8")


def cmd_shap(cfg, out, args):
    ds = _load_dataset(cfg, out)
    models, headers, stats = _load_ensemble(cfg, out, args)
    by_metric = {h["selected_by"]: m for m, h in zip(models, headers)}
    model = by_metric.get("f1", models[0])
    train_idx, eval_idx = _split_indices(cfg, ds)
    a = cfg["attribution"]
    acfg = A.AttributionConfig(
        n_permutations=a["n_permutations"], n_background=a["n_background"],
        zone_restricted_background=a["zone_restricted_background"],
        max_samples_per_zone=a["max_samples_per_zone"], seed=cfg["seed"])
    eval_ds = ds.subset(eval_idx)
    # background pool: training-split rows, indexed within the *source* dataset
    pool_ds = ds.subset(train_idx)
    merged = _merge_for_attribution(eval_ds, pool_ds)
    phis, explained, cells = A.zoned_shapley(model, stats, merged["dataset"],
                                             merged["background_pool"], acfg)
    rows = []
    for (zone, year), cell in sorted(cells.items()):
        for ch in cell["channels"]:
            rows.append((zone, year, ch["channel"], ch["signed_mean_shap"],
                         ch["mean_abs_shap"], ch["rank"], cell["n_samples"]))
    _write_csv(out / "attribution.csv", f"# seed={cfg['seed']}\n",
               ("zone", "year", "channel", "signed_mean_shap", "mean_abs_shap",
                "rank", "n_samples"), rows)
    summary = {
        "seed": cfg["seed"],
        "n_explained": len(explained),
        "cells": [
            {"zone": zone, "year": year, **cell}
            for (zone, year), cell in sorted(cells.items())
        ],
    }
    (out / "attribution.json").write_text(json.dumps(summary, indent=1, sort_keys=True),
                                          encoding="utf-8")


def _merge_for_attribution(eval_ds, pool_ds):
    """Stack evaluation rows first, then the background pool, into one dataset."""
    import numpy as np
    from .data import Dataset

    n_eval = len(eval_ds)
    merged = Dataset(
        manifest=eval_ds.manifest,
        windows=np.concatenate([eval_ds.windows, pool_ds.windows], axis=0),
        sample_ids=np.concatenate([eval_ds.sample_ids, pool_ds.sample_ids]),
        x_km=np.concatenate([eval_ds.x_km, pool_ds.x_km]),
        y_km=np.concatenate([eval_ds.y_km, pool_ds.y_km]),
        dates=eval_ds.dates + pool_ds.dates,
        zones=np.concatenate([eval_ds.zones, pool_ds.zones]),
        labels=np.concatenate([eval_ds.labels, pool_ds.labels]),
    )
    return {"dataset": merged, "background_pool": np.arange(n_eval, n_eval + len(pool_ds))}


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "uq": cmd_uq,
    "discard": cmd_discard,
    "shap": cmd_shap,
}


if __name__ == "__main__":
    sys.exit(main())
