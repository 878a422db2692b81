"""Data unification: daily aggregation, linear regridding, z-scoring,
sequential splitting, event labels and temporal windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, ExtrapolationError, ShapeError, ValidationError
from .grid import FieldCatalog, GridField

STD_EPSILON = 1e-8


# ---------------------------------------------------------------- regridding


def _linear_weights(src: np.ndarray, dst: np.ndarray, axis_name: str):
    if len(src) < 2:
        raise ShapeError(f"cannot interpolate along {axis_name}: source axis has length {len(src)}")
    tol = 1e-9 * max(1.0, float(np.abs(src).max()))
    if dst.min() < src[0] - tol or dst.max() > src[-1] + tol:
        raise ExtrapolationError(
            f"target {axis_name} [{dst.min()}, {dst.max()}] leaves source hull [{src[0]}, {src[-1]}]"
        )
    lo = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, len(src) - 2)
    frac = np.clip((dst - src[lo]) / (src[lo + 1] - src[lo]), 0.0, 1.0)
    return lo, frac


def regrid_linear(field: GridField, target_lat, target_lon) -> GridField:
    """Separable (bilinear) interpolation onto new lat/lon axes.

    A target cell is valid only if every source cell with nonzero weight is
    valid. No extrapolation is performed.
    """
    tlat = np.asarray(target_lat, dtype=np.float64)
    tlon = np.asarray(target_lon, dtype=np.float64)
    i0, fy = _linear_weights(field.lat_axis, tlat, "lat")
    j0, fx = _linear_weights(field.lon_axis, tlon, "lon")

    src = field.data.astype(np.float64)
    m = field.mask
    # corner weights [LAT', LON']
    w00 = np.outer(1 - fy, 1 - fx)
    w01 = np.outer(1 - fy, fx)
    w10 = np.outer(fy, 1 - fx)
    w11 = np.outer(fy, fx)
    I0, J0 = np.meshgrid(i0, j0, indexing="ij")
    corners = ((I0, J0, w00), (I0, J0 + 1, w01), (I0 + 1, J0, w10), (I0 + 1, J0 + 1, w11))

    mask = np.ones(w00.shape, dtype=bool)
    for I, J, w in corners:
        mask &= ~((w > 0) & ~m[I, J])

    out = np.zeros((src.shape[0], len(tlat), len(tlon), src.shape[3]))
    for I, J, w in corners:
        vals = src[:, I, J, :]
        # zero-weight corners may sit on masked cells; never let their NaN in
        out += np.where((w > 0)[None, :, :, None], vals, 0.0) * w[None, :, :, None]
    return field.replace(data=out, lat_axis=tlat, lon_axis=tlon, mask=mask)


# ---------------------------------------------------------------- aggregation


def aggregate_daily(field: GridField, steps_per_day: int, reducer: str = "mean") -> GridField:
    T = field.data.shape[0]
    if steps_per_day < 1 or T % steps_per_day:
        raise ShapeError(f"time length {T} is not divisible by steps_per_day={steps_per_day}")
    if reducer not in ("mean", "sum"):
        raise ConfigError(f"unknown reducer {reducer!r}")
    if steps_per_day == 1:
        return field
    blocks = field.data.astype(np.float64).reshape(T // steps_per_day, steps_per_day, *field.data.shape[1:])
    out = blocks.sum(axis=1)
    if reducer == "mean":
        out = out / steps_per_day
    days = field.time_axis[::steps_per_day]
    return field.replace(data=out, time_axis=days)


# ---------------------------------------------------------------- standardizer


@dataclass(frozen=True)
class StandardizerStats:
    mean: np.ndarray  # [lat, lon, feature]
    std: np.ndarray
    epsilon: float = STD_EPSILON

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 3:
            raise ValidationError("standardizer mean/std must share a [lat, lon, feature] shape")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        finite = np.isfinite(self.std)
        if np.any(self.std[finite] < self.epsilon):
            raise ValidationError("std must be floored at epsilon")


def fit_standardizer(field: GridField, time_range: range | slice | None = None,
                     epsilon: float = STD_EPSILON) -> StandardizerStats:
    """Per-cell, per-feature time mean and population std.

    ``time_range`` restricts the fit to a segment (normally the training
    split). Masked cells keep NaN statistics.
    """
    data = field.data
    if time_range is not None:
        sl = time_range if isinstance(time_range, slice) else slice(time_range.start, time_range.stop)
        data = data[sl]
    if data.shape[0] < 2:
        raise ShapeError("fitting a standardizer needs at least 2 time steps")
    x = data.astype(np.float64)
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    std = np.where(np.isnan(std), np.nan, np.maximum(std, epsilon))
    return StandardizerStats(mean, std, epsilon)


def _check_stats(field: GridField, stats: StandardizerStats):
    if field.data.shape[1:] != stats.mean.shape:
        raise AlignmentError(f"field spatial/feature shape {field.data.shape[1:]} != stats shape {stats.mean.shape}")


def standardize(field: GridField, stats: StandardizerStats) -> GridField:
    _check_stats(field, stats)
    return field.replace(data=(field.data.astype(np.float64) - stats.mean) / stats.std)


def destandardize(field: GridField, stats: StandardizerStats) -> GridField:
    _check_stats(field, stats)
    return field.replace(data=field.data.astype(np.float64) * stats.std + stats.mean)


def destandardize_array(z: np.ndarray, stats: StandardizerStats, feature: int = 0) -> np.ndarray:
    """Inverse transform for raw ``[..., lat, lon]`` arrays of one feature."""
    return z * stats.std[..., feature] + stats.mean[..., feature]


def stats_to_field(stats: StandardizerStats, template: GridField) -> GridField:
    """Pack stats as a 2-step field (row 0 mean, row 1 std) for GRD1 storage."""
    data = np.stack([stats.mean, stats.std])
    return template.replace(data=data, time_axis=np.array([0.0, 1.0]))


def stats_from_field(field: GridField, epsilon: float = STD_EPSILON) -> StandardizerStats:
    if field.data.shape[0] != 2:
        raise ValidationError("stats field must have exactly two time rows (mean, std)")
    d = field.data.astype(np.float64)
    return StandardizerStats(d[0], d[1], epsilon)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.64
    valid_fraction: float = 0.16
    test_fraction: float = 0.2

    def __post_init__(self):
        fr = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if not all(0 < f < 1 for f in fr):
            raise ConfigError(f"split fractions must lie in (0, 1): {fr}")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fr)!r}")

    def boundaries(self, T: int) -> tuple[int, int]:
        # the small nudge keeps 0.64 + 0.16 from landing just below 0.8
        a = math.floor(self.train_fraction * T + 1e-9)
        b = math.floor((self.train_fraction + self.valid_fraction) * T + 1e-9)
        return a, b


def split_sequential(T: int, spec: SplitSpec = SplitSpec()) -> tuple[range, range, range]:
    """Contiguous train/valid/test ranges; floors at each boundary, remainder to test."""
    if T < 3:
        raise ConfigError(f"need T >= 3 to split, got {T}")
    a, b = spec.boundaries(T)
    parts = (range(0, a), range(a, b), range(b, T))
    for name, r in zip(("train", "valid", "test"), parts):
        if len(r) == 0:
            raise ConfigError(f"empty {name} segment for T={T}")
    return parts


# ---------------------------------------------------------------- labels


def make_event_labels(precip: GridField, threshold: float, feature: str | None = None) -> GridField:
    """Binary event field: 1 where precipitation >= threshold."""
    if not threshold > 0:
        raise ConfigError(f"event threshold must be positive, got {threshold}")
    feat = feature or precip.feature_names[0]
    x = precip.feature(feat)
    lab = np.where(np.isnan(x), np.nan, (x >= threshold).astype(np.float32))
    return precip.replace(data=lab[..., None], feature_names=("event",))


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowedBatch:
    inputs: np.ndarray   # [sample, timestep, feature]
    targets: np.ndarray  # [sample]
    time_index: np.ndarray
    lat_index: np.ndarray
    lon_index: np.ndarray
    feature_names: tuple[str, ...]

    def __len__(self):
        return self.inputs.shape[0]


def window_indices(T: int, mask: np.ndarray, w: int, t_start: int | None = None, t_stop: int | None = None):
    """(time, lat, lon) of every window end in ``[t_start, t_stop)``, time-major."""
    if w < 1:
        raise ShapeError("window length must be >= 1")
    if T < w:
        raise ShapeError(f"time length {T} shorter than window {w}")
    lo = w - 1 if t_start is None else max(t_start, w - 1)
    hi = T if t_stop is None else t_stop
    ii, jj = np.nonzero(mask)
    tt = np.repeat(np.arange(lo, hi), len(ii))
    return tt, np.tile(ii, max(hi - lo, 0)), np.tile(jj, max(hi - lo, 0))


def gather_windows(stack: np.ndarray, tt, ii, jj, w: int, edge_pad: bool = False) -> np.ndarray:
    """Pull ``[n, w, C]`` windows ending at ``(tt, ii, jj)`` out of ``[T, LAT, LON, C]``."""
    offs = np.arange(-w + 1, 1)
    times = tt[:, None] + offs[None, :]
    if edge_pad:
        times = np.clip(times, 0, None)
    elif times.min(initial=0) < 0:
        raise ShapeError("window reaches before the first time step")
    return stack[times, ii[:, None], jj[:, None], :]


def window_temporal(catalog: FieldCatalog, w: int, inputs: list[str] | None = None,
                    target: str | None = None) -> WindowedBatch:
    """Sliding per-cell windows with lat/lon folded into the sample axis.

    Inputs default to every non-label entry; the target is the label value at
    the window's last step.
    """
    target = target or catalog.label_name()
    inputs = inputs or [n for n in catalog.names() if n != target]
    stack = catalog.stack(inputs)
    T = stack.shape[0]
    tt, ii, jj = window_indices(T, catalog.mask, w)
    x = gather_windows(stack, tt, ii, jj, w)
    y = catalog[target].data[tt, ii, jj, 0].astype(np.float64)
    return WindowedBatch(x, y, tt, ii, jj, tuple(catalog.channel_names(inputs)))
