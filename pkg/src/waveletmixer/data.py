"""Dataset container, sampling protocol, splitting, synthetic generation.

On-disk format: ``<name>.wmxd`` holds magic "WMXD", version, dims and a
little-endian float32 payload in [sample][time][channel] order; sample
metadata (ids, locations, dates, zones, labels) and the channel manifest
live in the sidecar ``<name>.manifest.json``.
"""

from __future__ import annotations

import csv
import datetime
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"WMXD"
FORMAT_VERSION = 1

DEFAULT_SPLITS = {"train_end": "2020-12-31", "val_end": "2022-12-31", "test_end": "2024-12-31"}


@dataclass
class DatasetManifest:
    channel_names: list
    channel_roles: dict            # name -> dynamic | bypass | landcover
    fire_channel: str
    window_len: int
    horizon: int = 1
    zone_table: dict = field(default_factory=dict)   # code -> descriptive name
    split_boundaries: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))
    provenance: str = ""
    generator: dict | None = None  # synthetic ground-truth parameters, when applicable

    def validate(self):
        lc = [n for n, r in self.channel_roles.items() if r == "landcover"]
        if len(lc) != 1:
            raise ValueError(f"manifest must declare exactly one landcover channel, got {lc}")
        missing = [n for n in self.channel_names if n not in self.channel_roles]
        if missing:
            raise ValueError(f"channels without a role: {missing}")
        if self.fire_channel not in self.channel_names:
            raise ValueError(f"fire channel {self.fire_channel!r} not in channel list")

    def to_dict(self):
        return {
            "channel_names": self.channel_names,
            "channel_roles": self.channel_roles,
            "fire_channel": self.fire_channel,
            "window_len": self.window_len,
            "horizon": self.horizon,
            "zone_table": {str(k): v for k, v in self.zone_table.items()},
            "split_boundaries": self.split_boundaries,
            "provenance": self.provenance,
            "generator": self.generator,
        }

    @staticmethod
    def from_dict(d):
        return DatasetManifest(
            channel_names=list(d["channel_names"]),
            channel_roles=dict(d["channel_roles"]),
            fire_channel=d["fire_channel"],
            window_len=int(d["window_len"]),
            horizon=int(d.get("horizon", 1)),
            zone_table={int(k): v for k, v in d.get("zone_table", {}).items()},
            split_boundaries=dict(d.get("split_boundaries", DEFAULT_SPLITS)),
            provenance=d.get("provenance", ""),
            generator=d.get("generator"),
        )


@dataclass
class Dataset:
    """Windows plus aligned per-sample metadata arrays."""

    manifest: DatasetManifest
    windows: np.ndarray            # [n, T, N] float32
    sample_ids: np.ndarray         # [n] str
    x_km: np.ndarray               # [n] float
    y_km: np.ndarray               # [n] float
    dates: list                    # [n] datetime.date
    zones: np.ndarray              # [n] int
    labels: np.ndarray             # [n] int {0,1}

    def __len__(self):
        return self.windows.shape[0]

    def years(self):
        return np.array([d.year for d in self.dates])

    def subset(self, index):
        idx = np.asarray(index)
        return Dataset(
            manifest=self.manifest,
            windows=self.windows[idx],
            sample_ids=self.sample_ids[idx],
            x_km=self.x_km[idx],
            y_km=self.y_km[idx],
            dates=[self.dates[i] for i in idx],
            zones=self.zones[idx],
            labels=self.labels[idx],
        )


def write_dataset(path_stem, dataset: Dataset):
    """Write <stem>.wmxd + <stem>.manifest.json; payload is float32 LE."""
    dataset.manifest.validate()
    n, t_len, n_chan = dataset.windows.shape
    if t_len != dataset.manifest.window_len or n_chan != len(dataset.manifest.channel_names):
        raise ValueError(
            f"payload shape {dataset.windows.shape} disagrees with manifest "
            f"(T={dataset.manifest.window_len}, N={len(dataset.manifest.channel_names)})"
        )
    stem = str(path_stem)
    with open(stem + ".wmxd", "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIII", FORMAT_VERSION, n, t_len, n_chan))
        f.write(np.ascontiguousarray(dataset.windows, dtype="<f4").tobytes())
    sidecar = {
        "manifest": dataset.manifest.to_dict(),
        "samples": {
            "sample_ids": dataset.sample_ids.tolist(),
            "x_km": dataset.x_km.tolist(),
            "y_km": dataset.y_km.tolist(),
            "dates": [d.isoformat() for d in dataset.dates],
            "zones": dataset.zones.tolist(),
            "labels": dataset.labels.tolist(),
        },
    }
    with open(stem + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def read_dataset(path_stem) -> Dataset:
    stem = str(path_stem)
    with open(stem + ".manifest.json", encoding="utf-8") as f:
        sidecar = json.load(f)
    manifest = DatasetManifest.from_dict(sidecar["manifest"])
    with open(stem + ".wmxd", "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a dataset payload: bad magic {magic!r}")
        header = f.read(struct.calcsize("<HIII"))
        if len(header) != struct.calcsize("<HIII"):
            raise ValueError("dataset payload truncated in header")
        version, n, t_len, n_chan = struct.unpack("<HIII", header)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        if t_len != manifest.window_len or n_chan != len(manifest.channel_names):
            raise ValueError(
                f"manifest/payload shape disagreement: payload T={t_len} N={n_chan}, "
                f"manifest T={manifest.window_len} N={len(manifest.channel_names)}"
            )
        raw = f.read(4 * n * t_len * n_chan)
        if len(raw) != 4 * n * t_len * n_chan:
            raise ValueError(f"dataset payload truncated: expected {n}x{t_len}x{n_chan} floats")
        windows = np.frombuffer(raw, dtype="<f4").reshape(n, t_len, n_chan).copy()
    s = sidecar["samples"]
    return Dataset(
        manifest=manifest,
        windows=windows,
        sample_ids=np.array(s["sample_ids"], dtype=object),
        x_km=np.array(s["x_km"], dtype=np.float64),
        y_km=np.array(s["y_km"], dtype=np.float64),
        dates=[datetime.date.fromisoformat(d) for d in s["dates"]],
        zones=np.array(s["zones"], dtype=np.int64),
        labels=np.array(s["labels"], dtype=np.int64),
    )


# -- sampling protocol -------------------------------------------------


@dataclass
class SamplerConfig:
    negative_ratio: int = 2
    exclusion_radius_km: float = 60.0
    exclusion_days: int = 3
    per_zone_parity: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.negative_ratio < 1:
            raise ValueError("negative_ratio must be >= 1")
        if self.exclusion_radius_km < 0 or self.exclusion_days < 0:
            raise ValueError("exclusion bounds must be non-negative")


@dataclass
class CatalogRow:
    sample_id: str
    x_km: float
    y_km: float
    date: datetime.date
    zone: int
    fire_flag: int


def read_catalog(path):
    """Catalog CSV: id, x_km, y_km, date, zone, fire_flag."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            rows.append(CatalogRow(
                sample_id=rec["id"],
                x_km=float(rec["x_km"]),
                y_km=float(rec["y_km"]),
                date=datetime.date.fromisoformat(rec["date"]),
                zone=int(rec["zone"]),
                fire_flag=int(rec["fire_flag"]),
            ))
    return rows


def exclusion_filter(negatives, fires, config: SamplerConfig):
    """Reject negatives within radius AND day window of any fire (both inclusive)."""
    if not negatives or not fires:
        return list(negatives)
    fx = np.array([f.x_km for f in fires])
    fy = np.array([f.y_km for f in fires])
    fd = np.array([f.date.toordinal() for f in fires])
    r2 = config.exclusion_radius_km ** 2
    admitted = []
    for cand in negatives:
        d2 = (fx - cand.x_km) ** 2 + (fy - cand.y_km) ** 2
        dt = np.abs(fd - cand.date.toordinal())
        if not np.any((d2 <= r2) & (dt <= config.exclusion_days)):
            admitted.append(cand)
    return admitted


def stratified_sample(positives, admitted_negatives, config: SamplerConfig):
    """Per-zone draw of ratio * n_positives negatives, without replacement.

    Returns (selected rows, report). Zones short of negatives contribute all
    they have and are flagged in report["deficits"].
    """
    rng = np.random.default_rng(config.seed)
    by_zone_pos = {}
    for p in positives:
        by_zone_pos.setdefault(p.zone, []).append(p)
    by_zone_neg = {}
    for n in admitted_negatives:
        by_zone_neg.setdefault(n.zone, []).append(n)
    selected = list(positives)
    report = {"zones": {}, "deficits": []}
    for zone in sorted(by_zone_pos):
        wanted = config.negative_ratio * len(by_zone_pos[zone])
        pool = by_zone_neg.get(zone, [])
        if len(pool) < wanted:
            report["deficits"].append(
                {"zone": zone, "wanted": wanted, "available": len(pool)})
            chosen = list(pool)
        else:
            idx = rng.choice(len(pool), size=wanted, replace=False)
            chosen = [pool[i] for i in sorted(idx)]
        selected.extend(chosen)
        report["zones"][zone] = {"positives": len(by_zone_pos[zone]), "negatives": len(chosen)}
    return selected, report


def chronological_split(dates, boundaries=None):
    """Index arrays (train, val, test) by date; every record must fall in a range."""
    b = boundaries or DEFAULT_SPLITS
    train_end = datetime.date.fromisoformat(b["train_end"])
    val_end = datetime.date.fromisoformat(b["val_end"])
    test_end = datetime.date.fromisoformat(b["test_end"])
    train, val, test = [], [], []
    for i, d in enumerate(dates):
        if d <= train_end:
            train.append(i)
        elif d <= val_end:
            val.append(i)
        elif d <= test_end:
            test.append(i)
        else:
            raise ValueError(f"record {i} dated {d} falls outside all split ranges")
    return np.array(train, dtype=np.intp), np.array(val, dtype=np.intp), np.array(test, dtype=np.intp)


# -- synthetic generator -----------------------------------------------

SYNTH_ZONES = (1, 5, 8, 9, 10)  # the five dominant land-cover classes

SYNTH_CHANNELS = [
    "temperature", "dryness", "precipitation", "wind", "humidity",
    "fuel_moisture", "ndvi", "elevation", "dist_roads", "dist_settlements",
    "fire_history", "landcover",
]

SYNTH_ROLES = {
    "temperature": "dynamic", "dryness": "dynamic", "precipitation": "dynamic",
    "wind": "dynamic", "humidity": "dynamic", "fuel_moisture": "dynamic",
    "ndvi": "dynamic", "elevation": "bypass", "dist_roads": "bypass",
    "dist_settlements": "bypass", "fire_history": "bypass", "landcover": "landcover",
}


@dataclass
class SynthConfig:
    n_samples: int = 5000
    window_len: int = 32
    n_channels: int = 12
    seed: int = 0
    temp_coeff: float = 9.0       # a > 0: warmth raises fire odds
    dryness_coeff: float = 6.0    # b > 0
    precip_coeff: float = 6.0     # c > 0: recent rain lowers fire odds
    base_logit: float = -5.2      # calibrates the positive rate near the 1:2 protocol
    year_start: int = 2015
    year_end: int = 2024

    def __post_init__(self):
        if self.n_channels != len(SYNTH_CHANNELS):
            raise ValueError(f"synthetic generator is defined for {len(SYNTH_CHANNELS)} channels")
        if self.window_len < 8:
            raise ValueError("window_len must be >= 8 for the recency summaries")


def synth_generate(config: SynthConfig) -> Dataset:
    """Seasonal-sinusoid + AR(1) drivers with a known fire-risk mechanism.

    Latent logit = a*temp_recent + b*dryness_recent - c*precip_recent
    + zone offset; labels are Bernoulli draws. Generator parameters are
    recorded in the manifest so attribution direction is checkable.
    """
    rng = np.random.default_rng(config.seed)
    n, t_len = config.n_samples, config.window_len
    n_chan = len(SYNTH_CHANNELS)
    zone_offsets = {1: 0.0, 5: -0.4, 8: 0.2, 9: 0.4, 10: -0.2}

    windows = np.zeros((n, t_len, n_chan), dtype=np.float32)
    zones = rng.choice(SYNTH_ZONES, size=n)
    x_km = rng.uniform(0.0, 1000.0, size=n)
    y_km = rng.uniform(0.0, 1000.0, size=n)

    start = datetime.date(config.year_start, 1, 1)
    end = datetime.date(config.year_end, 12, 31)
    span = (end - start).days
    # keep the window fully inside the covered range
    offsets = rng.integers(t_len, span + 1, size=n)
    dates = [start + datetime.timedelta(days=int(o)) for o in offsets]

    doy = np.array([d.timetuple().tm_yday for d in dates])
    tt = np.arange(t_len)
    season = np.sin(2.0 * np.pi * (doy[:, None] - t_len + tt[None, :]) / 365.25)

    def ar1(scale, rho=0.85):
        noise = rng.normal(0.0, scale, size=(n, t_len))
        out = np.zeros((n, t_len))
        out[:, 0] = noise[:, 0]
        for t in range(1, t_len):
            out[:, t] = rho * out[:, t - 1] + noise[:, t]
        return out

    level = rng.normal(0.0, 0.6, size=(n, 1))
    windows[..., 0] = 0.8 * season + level + ar1(0.25)          # temperature
    windows[..., 1] = 0.5 * season + rng.normal(0, 0.5, (n, 1)) + ar1(0.3)   # dryness
    precip_base = np.maximum(ar1(0.4) - 0.2 * season, 0.0)
    windows[..., 2] = precip_base                                # precipitation
    windows[..., 3] = np.abs(ar1(0.5)) + 0.5                     # wind
    windows[..., 4] = -0.4 * season + ar1(0.3)                   # humidity
    windows[..., 5] = 0.3 * season + ar1(0.2)                    # fuel moisture
    windows[..., 6] = 0.5 + 0.3 * season + ar1(0.1)              # ndvi
    windows[..., 7] = rng.uniform(0.0, 2.5, size=(n, 1)) * np.ones((1, t_len))   # elevation
    windows[..., 8] = rng.uniform(0.0, 1.0, size=(n, 1)) * np.ones((1, t_len))   # dist roads
    windows[..., 9] = rng.uniform(0.0, 1.0, size=(n, 1)) * np.ones((1, t_len))   # dist settlements
    windows[..., 10] = (rng.random((n, t_len)) < 0.01).astype(np.float32)        # fire history
    windows[..., 11] = zones[:, None]

    recent = slice(t_len - 7, t_len)
    temp_recent = windows[:, recent, 0].mean(axis=1)
    dry_recent = windows[:, recent, 1].mean(axis=1)
    precip_recent = windows[:, recent, 2].mean(axis=1)
    logits = (
        config.temp_coeff * (temp_recent - temp_recent.mean())
        + config.dryness_coeff * (dry_recent - dry_recent.mean())
        - config.precip_coeff * (precip_recent - precip_recent.mean())
        + np.array([zone_offsets[z] for z in zones])
        + config.base_logit
    )
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = (rng.random(n) < probs).astype(np.int64)

    manifest = DatasetManifest(
        channel_names=list(SYNTH_CHANNELS),
        channel_roles=dict(SYNTH_ROLES),
        fire_channel="fire_history",
        window_len=t_len,
        horizon=1,
        zone_table={1: "Evergreen Needleleaf Forests", 5: "Mixed Forests",
                    8: "Woody Savannas", 9: "Savannas", 10: "Grasslands"},
        provenance=f"synthetic generator seed={config.seed}",
        generator={
            "seed": config.seed,
            "temp_coeff": config.temp_coeff,
            "dryness_coeff": config.dryness_coeff,
            "precip_coeff": config.precip_coeff,
            "base_logit": config.base_logit,
            "recency_days": 7,
            "zone_offsets": {str(k): v for k, v in zone_offsets.items()},
        },
    )
    return Dataset(
        manifest=manifest,
        windows=windows,
        sample_ids=np.array([f"synth-{i:06d}" for i in range(n)], dtype=object),
        x_km=x_km,
        y_km=y_km,
        dates=dates,
        zones=zones.astype(np.int64),
        labels=labels,
    )
