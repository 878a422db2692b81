"""UNet, TransUNet, CNN-Transformer, Transformer and LSTM networks.

Spatial models take ``[N, H, W, C]`` grids and return ``[N, H, W, 1]``;
temporal models take per-cell windows ``[N, w, C]`` and return ``[N, 1]``.
Classifier heads end in a sigmoid, regressor heads are linear.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    dense,
    encoder_block,
    lstm_sequence,
    maxpool2,
    no_grad,
    positional_encoding,
    reshape,
    sigmoid,
    tanh,
    upsample2,
)
from .autodiff.tensor import concat, tmean
from .errors import ConfigError, ShapeError

ARCHS = ("unet", "transunet", "transformer", "lstm", "cnn_transformer")
SPATIAL = ("unet", "transunet", "cnn_transformer")
PROB_FLOOR = 1e-7


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size settings."""

    arch: str = "transunet"
    head_mode: str = "regressor"
    in_channels: int = 10
    base_channels: int = 64
    depth: int = 4
    kernel_size: int = 3
    transformer_layers: int = 2
    heads: int = 4
    ff_width: int = 1024
    timesteps: int = 5
    d_model: int = 64
    lstm_hidden: int = 64
    dense_width: int = 1024
    cnn_channels: tuple = (16, 32, 64, 64)
    cnn_pools: int = 2
    height: int = 0
    width: int = 0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.head_mode not in ("classifier", "regressor"):
            raise ConfigError(f"head_mode must be classifier or regressor, got {self.head_mode!r}")
        if self.base_channels < 1 or self.depth < 1:
            raise ConfigError("base_channels and depth must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.arch == "transunet" and self.transformer_layers and (self.base_channels << self.depth) % self.heads:
            raise ConfigError(f"heads={self.heads} must divide the bottleneck width {self.base_channels << self.depth}")
        if self.arch == "transformer" and self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.arch == "cnn_transformer":
            if self.cnn_channels[-1] % self.heads:
                raise ConfigError(f"heads={self.heads} must divide the token width {self.cnn_channels[-1]}")
            if self.cnn_pools > len(self.cnn_channels):
                raise ConfigError("cnn_pools cannot exceed the number of conv stages")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def spatial(self) -> bool:
        return self.arch in SPATIAL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- padding


def pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad axes 1 and 2 of ``[N, H, W, C]`` at the bottom/right up to
    the next multiple of ``m``. Returns the padded array and the crop record."""
    if m < 1:
        raise ConfigError("multiple must be >= 1")
    H, W = x.shape[1], x.shape[2]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return x, (H, W)
    return np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect"), (H, W)


def crop(y, record: tuple[int, int]):
    H, W = record
    return y[:, :H, :W, :]


# ---------------------------------------------------------------- init


class _Params:
    def __init__(self, seed: int, dtype: str):
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.dtype = np.dtype(dtype)
        self.store: dict[str, Tensor] = {}

    def _add(self, name, arr):
        if name in self.store:
            raise ConfigError(f"duplicate parameter {name}")
        t = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        self.store[name] = t
        return t

    def glorot(self, name, shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-lim, lim, size=shape))

    def conv(self, name, k, cin, cout):
        self.glorot(name + ".w", (k, k, cin, cout), k * k * cin, k * k * cout)
        self._add(name + ".b", np.zeros(cout))

    def linear(self, name, din, dout):
        self.glorot(name + ".w", (din, dout), din, dout)
        self._add(name + ".b", np.zeros(dout))

    def encoder(self, prefix, D, ff):
        for n in ("wq", "wk", "wv", "wo"):
            self.glorot(prefix + n, (D, D), D, D)
            self._add(prefix + "b" + n[1], np.zeros(D))
        self._add(prefix + "ln1_g", np.ones(D))
        self._add(prefix + "ln1_b", np.zeros(D))
        self.glorot(prefix + "ff1_w", (D, ff), D, ff)
        self._add(prefix + "ff1_b", np.zeros(ff))
        self.glorot(prefix + "ff2_w", (ff, D), ff, D)
        self._add(prefix + "ff2_b", np.zeros(D))
        self._add(prefix + "ln2_g", np.ones(D))
        self._add(prefix + "ln2_b", np.zeros(D))


# ---------------------------------------------------------------- base


class Model:
    """Parameter container plus a differentiable ``forward``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}

    @property
    def spatial(self) -> bool:
        return self.cfg.spatial

    @property
    def classifier(self) -> bool:
        return self.cfg.head_mode == "classifier"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"state/parameter names differ: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _head(self, y: Tensor) -> Tensor:
        return sigmoid(y) if self.classifier else y

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Gradient-free forward in batches; classifier outputs are clamped
        into the open interval (0, 1)."""
        outs = []
        with no_grad():
            for s in range(0, x.shape[0], batch_size):
                outs.append(self.forward(x[s : s + batch_size]).data)
        y = np.concatenate(outs, axis=0)
        if self.classifier:
            y = np.clip(y, PROB_FLOOR, 1 - PROB_FLOOR)
        return y


def _as_input(x, dtype) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


# ---------------------------------------------------------------- UNet / TransUNet


class UNet(Model):
    """Encoder (conv-conv-pool) x depth, conv-conv bottleneck, decoder
    (upsample, concat skip, conv-conv) x depth, 1x1 output conv.

    With ``attention=True`` the bottleneck map is flattened into tokens and
    run through ``transformer_layers`` encoder blocks (TransUNet).
    """

    def __init__(self, cfg: ModelConfig, attention: bool = False):
        super().__init__(cfg)
        self.attention = attention
        P = _Params(cfg.seed, cfg.dtype)
        k, c = cfg.kernel_size, cfg.base_channels
        cin = cfg.in_channels
        self.widths = [c << s for s in range(cfg.depth)]
        for s, w in enumerate(self.widths):
            P.conv(f"enc{s}.conv1", k, cin, w)
            P.conv(f"enc{s}.conv2", k, w, w)
            cin = w
        self.bottleneck_width = c << cfg.depth
        P.conv("mid.conv1", k, cin, self.bottleneck_width)
        P.conv("mid.conv2", k, self.bottleneck_width, self.bottleneck_width)
        below = self.bottleneck_width
        for s in reversed(range(cfg.depth)):
            w = self.widths[s]
            P.conv(f"dec{s}.conv1", k, below + w, w)
            P.conv(f"dec{s}.conv2", k, w, w)
            below = w
        P.conv("out", 1, below, 1)
        # transformer params last so a zero-layer TransUNet shares UNet's init
        if attention:
            for layer in range(cfg.transformer_layers):
                P.encoder(f"tf{layer}.", self.bottleneck_width, cfg.ff_width)
        self.params = P.store

    @property
    def stage_widths(self) -> list[int]:
        return [*self.widths, self.bottleneck_width]

    def token_count(self, H: int, W: int) -> int:
        m = 1 << self.cfg.depth
        return (-(-H // m)) * (-(-W // m))

    def _conv(self, x, name):
        p = self.params
        return tanh(conv2d(x, p[name + ".w"], p[name + ".b"]))

    def forward(self, x) -> Tensor:
        p = self.params
        xd = _as_input(x, self.cfg.dtype)
        if xd.ndim != 4 or xd.shape[3] != self.cfg.in_channels:
            raise ShapeError(f"expected [N,H,W,{self.cfg.in_channels}] input, got {xd.shape}")
        xd, record = pad_to_multiple(xd, 1 << self.cfg.depth)
        h = Tensor(xd)
        skips = []
        for s in range(self.cfg.depth):
            h = self._conv(self._conv(h, f"enc{s}.conv1"), f"enc{s}.conv2")
            skips.append(h)
            h, _ = maxpool2(h)
        h = self._conv(self._conv(h, "mid.conv1"), "mid.conv2")
        if self.attention and self.cfg.transformer_layers > 0:
            N, hh, ww, D = h.shape
            tok = reshape(h, (N, hh * ww, D)) + positional_encoding(hh * ww, D, h.dtype)
            for layer in range(self.cfg.transformer_layers):
                tok = encoder_block(tok, p, f"tf{layer}.", self.cfg.heads)
            h = reshape(tok, (N, hh, ww, D))
        for s in reversed(range(self.cfg.depth)):
            h = concat([upsample2(h), skips[s]], axis=-1)
            h = self._conv(self._conv(h, f"dec{s}.conv1"), f"dec{s}.conv2")
        y = conv2d(h, p["out.w"], p["out.b"])
        return self._head(crop(y, record))


def build_unet(cfg: ModelConfig) -> UNet:
    return UNet(cfg, attention=False)


def build_transunet(cfg: ModelConfig) -> UNet:
    return UNet(cfg, attention=True)


# ---------------------------------------------------------------- CNN-Transformer


class CNNTransformer(Model):
    """Conv stages (pooling after the first ``cnn_pools``), Transformer over
    the pooled map's tokens, then a dense layer onto the flattened grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        if cfg.height < 1 or cfg.width < 1:
            raise ConfigError("cnn_transformer needs the grid height and width in its config")
        P = _Params(cfg.seed, cfg.dtype)
        m = 1 << cfg.cnn_pools
        self.Hp, self.Wp = -(-cfg.height // m) * m, -(-cfg.width // m) * m
        cin = cfg.in_channels
        for s, w in enumerate(cfg.cnn_channels):
            P.conv(f"cnn{s}", cfg.kernel_size, cin, w)
            cin = w
        self.tokens = (self.Hp // m) * (self.Wp // m)
        for layer in range(cfg.transformer_layers):
            P.encoder(f"tf{layer}.", cin, cfg.ff_width)
        P.linear("head", self.tokens * cin, self.Hp * self.Wp)
        self.params = P.store

    def forward(self, x) -> Tensor:
        p, cfg = self.params, self.cfg
        xd = _as_input(x, cfg.dtype)
        if xd.ndim != 4 or xd.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
            raise ShapeError(f"expected [N,{cfg.height},{cfg.width},{cfg.in_channels}] input, got {xd.shape}")
        xd, record = pad_to_multiple(xd, 1 << cfg.cnn_pools)
        h = Tensor(xd)
        for s in range(len(cfg.cnn_channels)):
            h = tanh(conv2d(h, p[f"cnn{s}.w"], p[f"cnn{s}.b"]))
            if s < cfg.cnn_pools:
                h, _ = maxpool2(h)
        N, hh, ww, D = h.shape
        tok = reshape(h, (N, hh * ww, D)) + positional_encoding(hh * ww, D, h.dtype)
        for layer in range(cfg.transformer_layers):
            tok = encoder_block(tok, p, f"tf{layer}.", cfg.heads)
        y = dense(reshape(tok, (N, hh * ww * D)), p["head.w"], p["head.b"])
        y = reshape(y, (N, self.Hp, self.Wp, 1))
        return self._head(crop(y, record))


def build_cnn_transformer(cfg: ModelConfig) -> CNNTransformer:
    return CNNTransformer(cfg)


# ---------------------------------------------------------------- temporal models


class TemporalTransformer(Model):
    """Input embedding + positions, encoder stack, token mean, tanh dense, linear output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        P = _Params(cfg.seed, cfg.dtype)
        P.linear("embed", cfg.in_channels, cfg.d_model)
        for layer in range(cfg.transformer_layers):
            P.encoder(f"tf{layer}.", cfg.d_model, cfg.ff_width)
        P.linear("fc", cfg.d_model, cfg.dense_width)
        P.linear("out", cfg.dense_width, 1)
        self.params = P.store
        self._pe = positional_encoding(cfg.timesteps, cfg.d_model, np.dtype(cfg.dtype))

    def forward(self, x) -> Tensor:
        p, cfg = self.params, self.cfg
        xd = _as_input(x, cfg.dtype)
        if xd.ndim != 3 or xd.shape[1:] != (cfg.timesteps, cfg.in_channels):
            raise ShapeError(f"expected [N,{cfg.timesteps},{cfg.in_channels}] input, got {xd.shape}")
        tok = dense(Tensor(xd), p["embed.w"], p["embed.b"]) + self._pe
        for layer in range(cfg.transformer_layers):
            tok = encoder_block(tok, p, f"tf{layer}.", cfg.heads)
        h = tanh(dense(tmean(tok, axis=1), p["fc.w"], p["fc.b"]))
        return self._head(dense(h, p["out.w"], p["out.b"]))


def build_transformer_temporal(cfg: ModelConfig) -> TemporalTransformer:
    return TemporalTransformer(cfg)


class TemporalLSTM(Model):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        P = _Params(cfg.seed, cfg.dtype)
        Hd = cfg.lstm_hidden
        P.glorot("lstm.w", (cfg.in_channels, 4 * Hd), cfg.in_channels, 4 * Hd)
        P.glorot("lstm.u", (Hd, 4 * Hd), Hd, 4 * Hd)
        bias = np.zeros(4 * Hd)
        bias[Hd : 2 * Hd] = 1.0  # forget gate open at init
        P._add("lstm.b", bias)
        P.linear("fc", Hd, cfg.dense_width)
        P.linear("out", cfg.dense_width, 1)
        self.params = P.store

    def forward(self, x) -> Tensor:
        p, cfg = self.params, self.cfg
        xd = _as_input(x, cfg.dtype)
        if xd.ndim != 3 or xd.shape[1:] != (cfg.timesteps, cfg.in_channels):
            raise ShapeError(f"expected [N,{cfg.timesteps},{cfg.in_channels}] input, got {xd.shape}")
        h = lstm_sequence(Tensor(xd), p["lstm.w"], p["lstm.u"], p["lstm.b"])
        h = tanh(dense(h, p["fc.w"], p["fc.b"]))
        return self._head(dense(h, p["out.w"], p["out.b"]))


def build_lstm_temporal(cfg: ModelConfig) -> TemporalLSTM:
    return TemporalLSTM(cfg)


BUILDERS = {
    "unet": build_unet,
    "transunet": build_transunet,
    "transformer": build_transformer_temporal,
    "lstm": build_lstm_temporal,
    "cnn_transformer": build_cnn_transformer,
}


def build_model(cfg: ModelConfig) -> Model:
    return BUILDERS[cfg.arch](cfg)
