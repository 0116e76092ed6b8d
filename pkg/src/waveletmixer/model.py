"""Multi-scale wavelet-mixer forecasting architecture.

Pipeline: token assembly (continuous drivers + land-cover embedding +
calendar marks) -> input-stage multi-scale wavelet block on dynamic
channels -> L fusion layers (time-channel mixer in parallel with a
per-layer wavelet block, additively coupled and normalized) -> transient
exponential-weighting head -> linear projection to the forecast horizon.
The classification probability is the sigmoid of the forecast
fire-detection channel at the first horizon step.
"""

from __future__ import annotations

import datetime
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ABLATION_FLAGS = ("lulc_embedding", "input_msw", "dynamic_msw", "transient_head", "tcmixer")

MARK_WIDTH = 7
LC_CLASSES = 18  # codes 1..17 plus reserved row 0 for anything else


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    n_layers: int = 2
    d_hidden: int = 1024
    n_scales: int = 3
    patch_len: int = 16
    dropout: float = 0.1
    lc_embed_dim: int = 8
    t_pred: int = 1
    disable: tuple = ()

    def __post_init__(self):
        unknown = set(self.disable) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}; valid: {ABLATION_FLAGS}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")

    def disabled(self, flag: str) -> bool:
        return flag in self.disable


@dataclass(frozen=True)
class ChannelSchema:
    """Maps raw driver channels onto the model's token layout.

    Token order is fixed: continuous drivers (original order, land-cover
    removed), then the land-cover embedding columns (or the raw code when
    the embedding is ablated), then the calendar marks.
    """

    channel_names: tuple
    landcover_channel: int
    dynamic_raw: tuple        # raw indices routed through the wavelet path
    bypass_raw: tuple         # raw indices concatenated directly (incl. fire channel)
    fire_channel: int         # raw index of the fire-detection channel
    lc_width: int             # embedding width, or 1 when the embedding is ablated
    embed_lc: bool

    @property
    def n_continuous(self):
        return len(self.channel_names) - 1

    @property
    def mark_width(self):
        return MARK_WIDTH

    @property
    def total_tokens(self):
        return self.n_continuous + self.lc_width + MARK_WIDTH

    @property
    def n_forecast(self):
        """Forecast channel count: all tokens except the calendar marks."""
        return self.n_continuous + self.lc_width

    def _token_of_raw(self, raw_idx: int) -> int:
        if raw_idx == self.landcover_channel:
            raise ValueError("land-cover channel has no single continuous token")
        return raw_idx - (1 if raw_idx > self.landcover_channel else 0)

    @property
    def dynamic_tokens(self):
        return tuple(self._token_of_raw(i) for i in self.dynamic_raw)

    @property
    def fire_token(self):
        return self._token_of_raw(self.fire_channel)

    @staticmethod
    def build(channel_names, roles, fire_channel, config: ModelConfig) -> "ChannelSchema":
        """Derive the schema from manifest channel names and roles.

        ``roles`` maps each channel name to one of dynamic/bypass/landcover;
        exactly one channel must be landcover and the fire channel must be
        a bypass channel.
        """
        names = tuple(channel_names)
        lc = [i for i, n in enumerate(names) if roles[n] == "landcover"]
        if len(lc) != 1:
            raise ValueError(f"expected exactly one landcover channel, found {len(lc)}")
        dyn = tuple(i for i, n in enumerate(names) if roles[n] == "dynamic")
        byp = tuple(i for i, n in enumerate(names) if roles[n] == "bypass")
        if set(dyn) & set(byp):
            raise ValueError("a channel cannot be both dynamic and bypass")
        if len(dyn) + len(byp) + 1 != len(names):
            missing = [n for n in names if roles.get(n) not in ("dynamic", "bypass", "landcover")]
            raise ValueError(f"channels without a role: {missing}")
        if fire_channel not in names:
            raise ValueError(f"fire channel {fire_channel!r} not among channels")
        fire_idx = names.index(fire_channel)
        if fire_idx not in byp:
            raise ValueError("fire-detection channel must have the bypass role")
        embed = not config.disabled("lulc_embedding")
        return ChannelSchema(
            channel_names=names,
            landcover_channel=lc[0],
            dynamic_raw=dyn,
            bypass_raw=byp,
            fire_channel=fire_idx,
            lc_width=config.lc_embed_dim if embed else 1,
            embed_lc=embed,
        )


def encode_calendar(day: datetime.date) -> np.ndarray:
    """Seven deterministic encodings of annual progression for one day."""
    if not isinstance(day, datetime.date):
        raise TypeError(f"expected a date, got {type(day).__name__}")
    doy = day.timetuple().tm_yday
    m = day.month - 1
    wd = day.weekday()
    year_frac = doy / 365.25
    return np.array(
        [
            math.sin(2.0 * math.pi * year_frac),
            math.cos(2.0 * math.pi * year_frac),
            math.sin(2.0 * math.pi * m / 12.0),
            math.cos(2.0 * math.pi * m / 12.0),
            math.sin(2.0 * math.pi * wd / 7.0),
            math.cos(2.0 * math.pi * wd / 7.0),
            year_frac,
        ]
    )


def calendar_marks(target_dates, window_len: int) -> np.ndarray:
    """Mark tensor [B, T, 7] for windows covering the T days before each target."""
    cache = {}
    out = np.empty((len(target_dates), window_len, MARK_WIDTH))
    for b, target in enumerate(target_dates):
        for t in range(window_len):
            day = target - datetime.timedelta(days=window_len - t)
            vec = cache.get(day)
            if vec is None:
                vec = encode_calendar(day)
                cache[day] = vec
            out[b, t] = vec
    return out


def sanitize_landcover(codes: np.ndarray) -> np.ndarray:
    """Integer codes outside 1..17 map to the reserved row 0."""
    idx = np.rint(codes).astype(np.intp)
    idx[(idx < 1) | (idx > 17)] = 0
    return idx


# -- parameter containers ----------------------------------------------


class ScaleMLP:
    """Two-layer residual-correction MLP for one wavelet scale."""

    def __init__(self, length, d_hidden, rng, dtype):
        self.w1 = _uniform_init(rng, (d_hidden, length), length, dtype)
        self.b1 = _uniform_init(rng, (d_hidden,), length, dtype)
        self.w2 = _uniform_init(rng, (length, d_hidden), d_hidden, dtype)
        self.b2 = _uniform_init(rng, (length,), d_hidden, dtype)

    def __call__(self, x, dropout_rate, rng, training):
        h = T.relu(T.linear(x, self.w1, self.b1))
        h = T.dropout(h, dropout_rate, rng, training)
        return T.linear(h, self.w2, self.b2)

    def parameters(self, prefix):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


class WaveletBlockParams:
    """One MLP per scale 0..S, each acting on that scale's sequence length."""

    def __init__(self, seq_len, n_scales, d_hidden, dropout, rng, dtype):
        if seq_len < 2 ** n_scales:
            raise ValueError(
                f"sequence length {seq_len} too short for {n_scales} wavelet scales "
                f"(needs T >= {2 ** n_scales})"
            )
        self.n_scales = n_scales
        self.dropout = dropout
        lengths = [seq_len]
        for _ in range(n_scales):
            lengths.append(lengths[-1] // 2)
        self.lengths = lengths
        self.mlps = [ScaleMLP(lengths[s], d_hidden, rng, dtype) for s in range(n_scales + 1)]

    def parameters(self, prefix):
        out = []
        for s, mlp in enumerate(self.mlps):
            out.extend(mlp.parameters(f"{prefix}.f{s}"))
        return out


class TCMixerParams:
    """Patch-wise temporal MLP + cross-variable MLP with two layer norms."""

    def __init__(self, patch_len, n_tokens, d_hidden, rng, dtype):
        self.patch_len = patch_len
        self.time_w1 = _uniform_init(rng, (d_hidden, patch_len), patch_len, dtype)
        self.time_b1 = _uniform_init(rng, (d_hidden,), patch_len, dtype)
        self.time_w2 = _uniform_init(rng, (patch_len, d_hidden), d_hidden, dtype)
        self.time_b2 = _uniform_init(rng, (patch_len,), d_hidden, dtype)
        self.chan_w1 = _uniform_init(rng, (d_hidden, n_tokens), n_tokens, dtype)
        self.chan_b1 = _uniform_init(rng, (d_hidden,), n_tokens, dtype)
        self.chan_w2 = _uniform_init(rng, (n_tokens, d_hidden), d_hidden, dtype)
        self.chan_b2 = _uniform_init(rng, (n_tokens,), d_hidden, dtype)
        self.ln1_gamma = Tensor(np.ones(n_tokens, dtype=dtype), requires_grad=True)
        self.ln1_beta = Tensor(np.zeros(n_tokens, dtype=dtype), requires_grad=True)
        self.ln2_gamma = Tensor(np.ones(n_tokens, dtype=dtype), requires_grad=True)
        self.ln2_beta = Tensor(np.zeros(n_tokens, dtype=dtype), requires_grad=True)

    def parameters(self, prefix):
        names = ("time_w1", "time_b1", "time_w2", "time_b2",
                 "chan_w1", "chan_b1", "chan_w2", "chan_b2",
                 "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class WaveletMixer:
    """Full model: parameters plus the forward computation.

    Construction fixes the window length T (wavelet MLP widths depend on
    it). ``forward`` is pure given parameters; training-mode dropout draws
    from the generator passed in.
    """

    def __init__(self, config: ModelConfig, schema: ChannelSchema, window_len: int,
                 rng=None, dtype=np.float32):
        if window_len < 2 ** config.n_scales:
            raise ValueError(
                f"window length {window_len} too short for {config.n_scales} scales "
                f"(needs T >= {2 ** config.n_scales})"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(dtype)
        self.config = config
        self.schema = schema
        self.window_len = window_len
        self.dtype = dtype
        n_tok = schema.total_tokens

        self.lc_table = None
        if schema.embed_lc:
            self.lc_table = Tensor(
                (rng.normal(0.0, 0.02, size=(LC_CLASSES, config.lc_embed_dim))).astype(dtype),
                requires_grad=True,
            )
        self.input_block = None
        if not config.disabled("input_msw"):
            self.input_block = WaveletBlockParams(
                window_len, config.n_scales, config.d_hidden, config.dropout, rng, dtype)
        self.layer_blocks = []
        self.layer_mixers = []
        for _ in range(config.n_layers):
            blk = None
            if not config.disabled("dynamic_msw"):
                blk = WaveletBlockParams(
                    window_len, config.n_scales, config.d_hidden, config.dropout, rng, dtype)
            mix = None
            if not config.disabled("tcmixer"):
                mix = TCMixerParams(config.patch_len, n_tok, config.d_hidden, rng, dtype)
            self.layer_blocks.append(blk)
            self.layer_mixers.append(mix)
        self.lambda_log = None
        if not config.disabled("transient_head"):
            self.lambda_log = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.proj_w = _uniform_init(rng, (config.t_pred, window_len), window_len, dtype)
        self.proj_b = _uniform_init(rng, (config.t_pred,), window_len, dtype)

    # -- parameter bookkeeping ------------------------------------

    def named_parameters(self):
        """Fixed serialization order: embedding, input block, layers, head, projection."""
        out = []
        if self.lc_table is not None:
            out.append(("lc_embedding.table", self.lc_table))
        if self.input_block is not None:
            out.extend(self.input_block.parameters("input_msw"))
        for i, (blk, mix) in enumerate(zip(self.layer_blocks, self.layer_mixers)):
            if blk is not None:
                out.extend(blk.parameters(f"layers.{i}.msw"))
            if mix is not None:
                out.extend(mix.parameters(f"layers.{i}.tcm"))
        if self.lambda_log is not None:
            out.append(("transient.lambda_log", self.lambda_log))
        out.append(("proj.weight", self.proj_w))
        out.append(("proj.bias", self.proj_b))
        return out

    def n_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    # -- forward pieces --------------------------------------------

    def embed_landcover(self, codes: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.lc_table, sanitize_landcover(codes))

    def assemble_tokens(self, windows: np.ndarray, marks: np.ndarray) -> Tensor:
        """[B,T,N] raw windows + [B,T,7] marks -> [B,T,N_tok] token tensor."""
        if windows.shape[-1] != len(self.schema.channel_names):
            raise ValueError(
                f"window has {windows.shape[-1]} channels, schema expects "
                f"{len(self.schema.channel_names)}"
            )
        lc = self.schema.landcover_channel
        cont_idx = [i for i in range(windows.shape[-1]) if i != lc]
        cont = Tensor(windows[..., cont_idx].astype(self.dtype))
        if self.schema.embed_lc:
            lc_part = self.embed_landcover(windows[..., lc])
        else:
            lc_part = Tensor(windows[..., lc : lc + 1].astype(self.dtype))
        mark_part = Tensor(marks.astype(self.dtype))
        return T.concat([cont, lc_part, mark_part], axis=2)

    def _wavelet_block(self, x_dyn: Tensor, params: WaveletBlockParams, rng, training) -> Tensor:
        """Length-preserving multi-scale refinement of [B, T, C] dynamic channels."""
        u = T.transpose(x_dyn, (0, 2, 1))  # [B, C, T]
        pyramid = [u]
        for _ in range(params.n_scales):
            pyramid.append(T.haar_lowpass(pyramid[-1]))
        s = params.n_scales
        refined = T.add(pyramid[s], params.mlps[s](pyramid[s], params.dropout, rng, training))
        for s in range(params.n_scales - 1, -1, -1):
            up = T.upsample_linear(refined, params.lengths[s])
            refined = T.add(pyramid[s], params.mlps[s](up, params.dropout, rng, training))
        return T.transpose(refined, (0, 2, 1))

    def _tc_mixer(self, x: Tensor, params: TCMixerParams, rng, training) -> Tensor:
        """Patch-wise time mixing then channel mixing, both residual + LN."""
        B, t_len, n_tok = x.data.shape
        P = params.patch_len
        pad = (P - t_len % P) % P
        z = T.pad_replicate_last(x, 1, pad) if pad else x
        n_patch = (t_len + pad) // P
        z = T.reshape(z, (B, n_patch, P, n_tok))
        zt = T.transpose(z, (0, 1, 3, 2))
        mixed = T.linear(T.relu(T.linear(zt, params.time_w1, params.time_b1)),
                         params.time_w2, params.time_b2)
        z = T.add(z, T.transpose(mixed, (0, 1, 3, 2)))
        z = T.add(T.mul(T.layer_norm(z), params.ln1_gamma), params.ln1_beta)
        mixed = T.linear(T.relu(T.linear(z, params.chan_w1, params.chan_b1)),
                         params.chan_w2, params.chan_b2)
        z = T.add(z, mixed)
        z = T.add(T.mul(T.layer_norm(z), params.ln2_gamma), params.ln2_beta)
        z = T.reshape(z, (B, t_len + pad, n_tok))
        return T.slice_axis(z, 1, 0, t_len) if pad else z

    def _fusion_layer(self, x: Tensor, blk, mix, rng, training) -> Tensor:
        x_time = self._tc_mixer(x, mix, rng, training) if mix is not None else x
        if blk is not None:
            dyn = list(self.schema.dynamic_tokens)
            refined = self._wavelet_block(T.take_last_axis(x, dyn), blk, rng, training)
            x_ms = T.put_last_axis(x, dyn, refined)
        else:
            x_ms = x
        return T.layer_norm(T.add(x_time, x_ms))

    def _transient_head(self, h: Tensor) -> Tensor:
        t_len = h.data.shape[1]
        offsets = Tensor(-np.arange(t_len - 1, -1, -1, dtype=self.dtype))  # -(T-1-t)
        lam = T.exp(self.lambda_log)
        w = T.exp(T.mul(lam, offsets))
        w = T.reshape(w, (1, t_len, 1))
        return T.add(h, T.mul(h, w))

    def project_horizon(self, h: Tensor) -> Tensor:
        """Shared per-channel temporal projection; marks dropped from the output."""
        hc = T.transpose(h, (0, 2, 1))  # [B, N_tok, T]
        z = T.linear(hc, self.proj_w, self.proj_b)  # [B, N_tok, T_pred]
        z = T.transpose(z, (0, 2, 1))
        return T.slice_axis(z, 2, 0, self.schema.n_forecast)

    def forward(self, windows: np.ndarray, marks: np.ndarray, training=False, rng=None):
        """Returns (forecast [B, T_pred, N_forecast], fire_probability [B])."""
        if training and self.config.dropout > 0 and rng is None:
            raise ValueError("training-mode forward needs an RNG for dropout")
        x = self.assemble_tokens(windows, marks)
        if self.input_block is not None:
            dyn = list(self.schema.dynamic_tokens)
            refined = self._wavelet_block(T.take_last_axis(x, dyn), self.input_block, rng, training)
            x = T.put_last_axis(x, dyn, refined)
        for blk, mix in zip(self.layer_blocks, self.layer_mixers):
            x = self._fusion_layer(x, blk, mix, rng, training)
        if self.lambda_log is not None:
            x = self._transient_head(x)
        forecast = self.project_horizon(x)
        fire = T.slice_axis(T.slice_axis(forecast, 1, 0, 1), 2,
                            self.schema.fire_token, self.schema.fire_token + 1)
        prob = T.sigmoid(T.reshape(fire, (windows.shape[0],)))
        return forecast, prob

    def predict_proba(self, windows, marks) -> np.ndarray:
        with T.no_grad():
            return self.forward(windows, marks, training=False)[1].data

    # -- state I/O ---------------------------------------------------

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays):
        for name, p in self.named_parameters():
            src = np.asarray(arrays[name], dtype=self.dtype)
            if src.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(src)
            p.grad = None

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}


CHECKPOINT_MAGIC = b"WMXC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: WaveletMixer, *, channel_roles, selected_by=None,
                    normalization=None, seed=None, extra=None):
    """JSON header + little-endian float32 payload in named-parameter order."""
    params = model.named_parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "selected_by": selected_by,
        "seed": seed,
        "window_len": model.window_len,
        "config": {
            "n_layers": model.config.n_layers,
            "d_hidden": model.config.d_hidden,
            "n_scales": model.config.n_scales,
            "patch_len": model.config.patch_len,
            "dropout": model.config.dropout,
            "lc_embed_dim": model.config.lc_embed_dim,
            "t_pred": model.config.t_pred,
            "disable": list(model.config.disable),
        },
        "schema": {
            "channel_names": list(model.schema.channel_names),
            "roles": dict(channel_roles),
            "fire_channel": model.schema.channel_names[model.schema.fire_channel],
        },
        "param_order": [name for name, _ in params],
        "param_shapes": {name: list(p.data.shape) for name, p in params},
        "normalization": normalization,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model (and return its header) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = ModelConfig(
            n_layers=header["config"]["n_layers"],
            d_hidden=header["config"]["d_hidden"],
            n_scales=header["config"]["n_scales"],
            patch_len=header["config"]["patch_len"],
            dropout=header["config"]["dropout"],
            lc_embed_dim=header["config"]["lc_embed_dim"],
            t_pred=header["config"]["t_pred"],
            disable=tuple(header["config"]["disable"]),
        )
        schema = ChannelSchema.build(
            header["schema"]["channel_names"], header["schema"]["roles"],
            header["schema"]["fire_channel"], config)
        model = WaveletMixer(config, schema, header["window_len"], dtype=dtype)
        arrays = {}
        for name in header["param_order"]:
            shape = tuple(header["param_shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"checkpoint truncated while reading {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        model.load_state(arrays)
    return model, header
