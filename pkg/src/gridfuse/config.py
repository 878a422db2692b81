"""``key = value`` configuration files.

UTF-8 text, one assignment per line, ``#`` starts a comment. Keys map onto
the fields of :class:`SynthConfig`, :class:`ModelConfig` and
:class:`TrainConfig`; a few keys are shared (``seed``). Values are parsed
with the type of the target field.
"""

from __future__ import annotations

import dataclasses
import os
import typing
import zlib

import numpy as np

from .errors import ConfigError
from .models import ModelConfig
from .synth import SynthConfig
from .trainer import TrainConfig

# keys read by the command line itself rather than a dataclass
EXTRA_KEYS = {
    "thresholds": "comma-separated event thresholds for evaluation (mm/day)",
    "heavy_quantile": "truth percentile standing in for the heavy-rain tier",
    "background": "background samples for attribution",
    "attribution_samples": "(day, cell) samples explained by attribute",
    "permutations": "permutations per sample in sampled attribution mode",
    "split_train": "training fraction of the sequential split",
    "split_valid": "validation fraction",
    "split_test": "test fraction",
}

KEY_DOCS = {
    # synth
    "n_time": "synthetic days", "n_lat": "synthetic latitude cells", "n_lon": "synthetic longitude cells",
    "seed": "root seed; all randomness derives from it",
    "event_rate": "target fraction of rain days (>= 0.1 mm/day) in truth",
    "corr_length": "spatial correlation length of the latent field (cells)",
    "temporal_ar": "lag-1 autocorrelation of the latent field",
    "intensity_scale": "truth amount scale (mm/day)", "intensity_growth": "truth tail steepness",
    "wet_gradient": "climatological wet/dry contrast across the domain",
    "sea_radius": "radius of the masked corner (fraction of the domain)",
    "sp_coupling": "surface pressure coupling to the latent field (negative sign applied)",
    "t2m_coupling": "2 m temperature coupling", "d2m_coupling": "2 m dew point coupling",
    "sm_memory": "soil moisture persistence", "noise_channel": "add a pure-noise predictor",
    "error_corr_length": "smoothing sigma of product errors in cells (0 = white)",
    # model
    "arch": "unet | transunet | transformer | lstm | cnn_transformer",
    "head_mode": "regressor | classifier (set by --stage when omitted)",
    "in_channels": "input channels (set from the data when omitted)",
    "base_channels": "UNet first-stage width", "depth": "UNet pooling stages", "kernel_size": "conv kernel",
    "transformer_layers": "encoder blocks", "heads": "attention heads", "ff_width": "feed-forward width",
    "timesteps": "temporal window length", "d_model": "temporal transformer width",
    "lstm_hidden": "LSTM hidden size", "dense_width": "temporal head width",
    "cnn_channels": "CNN-Transformer stage widths, comma-separated", "cnn_pools": "pooled CNN stages",
    "height": "CNN-Transformer grid height (set from the data when omitted)",
    "width": "CNN-Transformer grid width (set from the data when omitted)",
    "dtype": "float32 | float64",
    # train
    "learning_rate": "Adam step size", "epochs": "training epochs", "beta1": "Adam beta1", "beta2": "Adam beta2",
    "epsilon": "Adam epsilon", "batch_size": "samples per step",
    "select_best_on_validation": "keep the checkpoint with the lowest validation loss",
    "stage": "classifier | regressor | direct",
    "hard_mask": "feed the thresholded (p >= 0.5) probability instead of the raw one",
    "samples_per_epoch": "temporal models: windows per epoch (0 = all)",
    "valid_samples": "temporal models: validation windows (0 = all)",
    **EXTRA_KEYS,
}

TARGETS = (SynthConfig, ModelConfig, TrainConfig)


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name != "recipes"}


def known_keys() -> set[str]:
    keys = set(EXTRA_KEYS)
    for cls in TARGETS:
        keys |= set(_fields(cls))
    return keys


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; errors carry ``source:line``."""
    out: dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"{source}:{no}: invalid key {key!r}")
        if key not in known_keys():
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        if value == "":
            raise ConfigError(f"{source}:{no}: key {key!r} has no value")
        out[key] = value
    return out


def read(path: str | os.PathLike) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not valid UTF-8 ({e.reason} at byte {e.start})") from None
    return parse_text(text, str(path))


def convert(value: str, typ, key: str):
    """Parse one string against a field annotation."""
    if isinstance(typ, str):
        typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ.split("|")[0].strip(), typ)
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple or origin is tuple or typ == "tuple":
            return tuple(int(s) for s in value.split(","))
        return value
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def build(cls, raw: dict[str, str], **overrides):
    """Instantiate ``cls`` from the keys it owns, with keyword overrides."""
    hints = _hints(cls)
    kw = {}
    for name in _fields(cls):
        if name in overrides and overrides[name] is not None:
            kw[name] = overrides[name]
        elif name in raw:
            typ = hints[name]
            if typing.get_origin(typ) is typing.Union or type(typ).__name__ == "UnionType":
                typ = next(a for a in typing.get_args(typ) if a is not type(None))
            kw[name] = convert(raw[name], typ, name)
    return cls(**kw)


def extra(raw: dict[str, str], key: str, default, typ=float):
    if key not in raw:
        return default
    if typ is list:
        try:
            return [float(s) for s in raw[key].split(",")]
        except ValueError:
            raise ConfigError(f"key {key!r}: expected comma-separated numbers, got {raw[key]!r}") from None
    return convert(raw[key], typ, key)


def require(raw: dict[str, str], keys) -> None:
    missing = [k for k in keys if k not in raw]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")


def dump(objs, extras: dict | None = None) -> str:
    """Serialize dataclass instances (and extras) back to config text."""
    lines = []
    for obj in objs:
        lines.append(f"# {type(obj).__name__}")
        for name in _fields(type(obj)):
            v = getattr(obj, name)
            if isinstance(v, tuple):
                v = ",".join(str(a) for a in v)
            lines.append(f"{name} = {v}")
    for k, v in (extras or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def help_text() -> str:
    """One line per accepted key, grouped by owner."""
    out = []
    for cls in TARGETS:
        out.append(f"  [{cls.__name__}]")
        for name, f in _fields(cls).items():
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            out.append(f"    {name} (default {default}): {KEY_DOCS.get(name, '')}")
    out.append("  [command line]")
    for k, d in EXTRA_KEYS.items():
        out.append(f"    {k}: {d}")
    return "\n".join(out)


def derive_seed(seed: int, *path: str) -> int:
    """Child seed for a named consumer, e.g. ``derive_seed(s, "train", "classifier")``.

    ``SeedSequence([seed, crc32(p1), crc32(p2), ...])`` reduced to one 32-bit
    word; independent of the order in which consumers ask.
    """
    key = [int(seed)] + [zlib.crc32(p.encode("utf-8")) for p in path]
    return int(np.random.SeedSequence(key).generate_state(1)[0])
