"""Run configuration: strict JSON document with per-module sections.

Unknown keys are rejected (first offender named) so typos like
"learing_rate" fail fast instead of silently using a default. ``seed`` is
mandatory at the top level and funnels every random choice in a run.
"""

from __future__ import annotations

import copy
import json

DEFAULT_CONFIG = {
    "seed": None,                 # mandatory; no default on purpose
    "precision": "f32",
    "data": {
        "dataset": None,          # path stem of .wmxd/.manifest.json pair
        "catalog": None,          # CSV for the sampling subcommand
        "eval_split": "test",     # train | val | test
        "synth": {
            "n_samples": 5000,
            "window_len": 32,
            "n_channels": 12,
            "temp_coeff": 9.0,
            "dryness_coeff": 6.0,
            "precip_coeff": 6.0,
            "base_logit": -5.2,
            "year_start": 2015,
            "year_end": 2024,
        },
        "sampler": {
            "negative_ratio": 2,
            "exclusion_radius_km": 60.0,
            "exclusion_days": 3,
            "per_zone_parity": True,
        },
        "splits": None,           # optional {train_end, val_end, test_end} overrides
    },
    "model": {
        "n_layers": 2,
        "d_hidden": 1024,
        "n_scales": 3,
        "patch_len": 16,
        "dropout": 0.1,
        "lc_embed_dim": 8,
        "t_pred": 1,
        "disable": [],
    },
    "train": {
        "learning_rate": 1e-5,
        "epochs": 50,
        "patience": 10,
        "batch_size": 32,
        "monitor": "f1",
    },
    "uncertainty": {
        "measures": ["total", "aleatoric", "epistemic"],
        "coverage_grid": [round(0.05 * k, 2) for k in range(20, 0, -1)],
    },
    "attribution": {
        "n_permutations": 16,
        "n_background": 64,
        "zone_restricted_background": True,
        "max_samples_per_zone": 200,
    },
    "output": {
        "checkpoint": "checkpoint_f1.wmxc",   # default artifact consumed by eval/predict
    },
}


class ConfigError(ValueError):
    pass


def _check_unknown(given: dict, template: dict, path=""):
    for key in given:
        here = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key '{here}'")
        if isinstance(template[key], dict) and isinstance(given[key], dict):
            _check_unknown(given[key], template[key], here)


def _merge(base: dict, override: dict):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=(), seed=None, precision=None) -> dict:
    """Resolve defaults <- file <- --set overrides <- --seed/--precision flags."""
    given = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            given = json.load(f)
        if not isinstance(given, dict):
            raise ConfigError("config file must hold a JSON object")
    _check_unknown(given, DEFAULT_CONFIG)
    cfg = _merge(DEFAULT_CONFIG, given)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, _, raw = item.partition("=")
        apply_override(cfg, key.strip(), raw.strip())
    if seed is not None:
        cfg["seed"] = seed
    if precision is not None:
        cfg["precision"] = precision
    if cfg["seed"] is None:
        raise ConfigError("config key 'seed' is mandatory (set it in the file or pass --seed)")
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigError("config key 'precision' must be 'f32' or 'f64'")
    return cfg


def apply_override(cfg: dict, dotted: str, raw: str):
    """--set data.synth.n_samples=500 style dotted-path assignment."""
    parts = dotted.split(".")
    node = cfg
    template = DEFAULT_CONFIG
    for p in parts[:-1]:
        if not isinstance(template, dict) or p not in template:
            raise ConfigError(f"unknown config key '{dotted}'")
        template = template[p]
        node = node.setdefault(p, {})
    leaf = parts[-1]
    if not isinstance(template, dict) or leaf not in template:
        raise ConfigError(f"unknown config key '{dotted}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value


def resolved_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)
