"""Verification metrics for gridded precipitation.

Continuous scores (Pearson R, RMSE) and contingency-table event scores
(CSI, POD, FAR, ETS). Undefined results (zero variance, no events, empty
input) are returned as NaN and excluded from spatial averages.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, ValidationError
from .grid import GridField

UNDEFINED = float("nan")
CONTINUOUS = ("r", "rmse")
EVENT = ("csi", "pod", "far", "ets")
METRICS = CONTINUOUS + EVENT


def _pairs(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise AlignmentError(f"series lengths differ: {x.size} vs {y.size}")
    ok = ~(np.isnan(x) | np.isnan(y))
    return x[ok], y[ok]


def pearson_r(x, y) -> float:
    """Pearson correlation over pairs where both values are present.

    NaN when fewer than two pairs remain or either series is constant.
    """
    x, y = _pairs(x, y)
    if x.size < 2:
        return UNDEFINED
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return UNDEFINED
    return float(np.dot(dx, dy)) / math.sqrt(sxx * syy)


def rmse(x, y) -> float:
    x, y = _pairs(x, y)
    if x.size == 0:
        return UNDEFINED
    d = x - y
    return math.sqrt(float(np.dot(d, d)) / d.size)


# ---------------------------------------------------------------- contingency


@dataclass(frozen=True)
class ContingencyTable:
    hits: int
    false_alarms: int
    misses: int
    correct_negatives: int

    def __post_init__(self):
        if min(self.hits, self.false_alarms, self.misses, self.correct_negatives) < 0:
            raise ValidationError("contingency counts must be nonnegative")

    @property
    def n(self) -> int:
        return self.hits + self.false_alarms + self.misses + self.correct_negatives


def events(x, threshold: float) -> np.ndarray:
    """1.0 where ``x >= threshold``, 0.0 below, NaN where ``x`` is NaN."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.isnan(x), np.nan, (x >= threshold).astype(np.float64))


def contingency(pred, obs) -> ContingencyTable:
    """Count hits/false alarms/misses/correct negatives over entries where both
    binary fields are present."""
    p, o = _pairs(pred, obs)
    if not (np.all((p == 0) | (p == 1)) and np.all((o == 0) | (o == 1))):
        raise ValidationError("contingency inputs must be binary (0/1)")
    p = p.astype(bool)
    o = o.astype(bool)
    hits = int(np.count_nonzero(p & o))
    fa = int(np.count_nonzero(p & ~o))
    miss = int(np.count_nonzero(~p & o))
    return ContingencyTable(hits, fa, miss, int(p.size) - hits - fa - miss)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else UNDEFINED


def csi(t: ContingencyTable) -> float:
    return _ratio(t.hits, t.hits + t.false_alarms + t.misses)


def pod(t: ContingencyTable) -> float:
    return _ratio(t.hits, t.hits + t.misses)


def far(t: ContingencyTable) -> float:
    return _ratio(t.false_alarms, t.hits + t.false_alarms)


def hits_random(t: ContingencyTable) -> float:
    if t.n == 0:
        return UNDEFINED
    return (t.hits + t.false_alarms) * (t.hits + t.misses) / t.n


def ets(t: ContingencyTable) -> float:
    """Equitable threat score; lies in [-1/3, 1] whenever defined."""
    if t.n == 0:
        return UNDEFINED
    hr = hits_random(t)
    return _ratio(t.hits - hr, t.hits + t.false_alarms + t.misses - hr)


EVENT_FUNCS = {"csi": csi, "pod": pod, "far": far, "ets": ets}


def event_score(metric: str, pred, obs, threshold: float) -> float:
    return EVENT_FUNCS[metric](contingency(events(pred, threshold), events(obs, threshold)))


def score(metric: str, pred, obs, threshold: float | None = None) -> float:
    """Any supported metric on a pair of series."""
    if metric == "r":
        return pearson_r(pred, obs)
    if metric == "rmse":
        return rmse(pred, obs)
    if metric in EVENT_FUNCS:
        if threshold is None:
            raise ConfigError(f"metric {metric} needs an event threshold")
        return event_score(metric, pred, obs, threshold)
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")


# ---------------------------------------------------------------- maps


@dataclass(frozen=True)
class SkillMap:
    values: np.ndarray  # [lat, lon], NaN where undefined
    lat_axis: np.ndarray
    lon_axis: np.ndarray
    metric: str
    threshold: float | None = None

    @property
    def average(self) -> float:
        """Equal-weight mean over defined cells."""
        v = self.values[~np.isnan(self.values)]
        return float(v.mean()) if v.size else UNDEFINED

    @property
    def defined(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.values)))


def _series_pair(pred: GridField, obs: GridField, feature: str | None):
    if not pred.same_grid(obs) or pred.data.shape[0] != obs.data.shape[0]:
        raise AlignmentError("prediction and observation fields are not aligned")
    fp = pred.feature_names[0] if feature is None else feature
    fo = obs.feature_names[0] if feature is None else feature
    return pred.feature(fp), obs.feature(fo)


def skill_map(pred: GridField, obs: GridField, metric: str, threshold: float | None = None,
              feature: str | None = None) -> SkillMap:
    """Metric per valid cell over the time axis."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if metric in EVENT and threshold is None:
        raise ConfigError(f"metric {metric} needs an event threshold")
    p, o = _series_pair(pred, obs, feature)
    out = np.full(p.shape[1:], np.nan)
    for i, j in zip(*np.nonzero(pred.mask)):
        out[i, j] = score(metric, p[:, i, j], o[:, i, j], threshold)
    return SkillMap(out, pred.lat_axis.copy(), pred.lon_axis.copy(), metric, threshold)


def pooled_score(pred: GridField, obs: GridField, metric: str, threshold: float | None = None,
                 feature: str | None = None) -> float:
    """One score over all valid (time, cell) pairs at once."""
    p, o = _series_pair(pred, obs, feature)
    m = pred.mask
    return score(metric, p[:, m], o[:, m], threshold)


def diff_map(a: SkillMap, b: SkillMap) -> SkillMap:
    if a.values.shape != b.values.shape or not (
        np.array_equal(a.lat_axis, b.lat_axis) and np.array_equal(a.lon_axis, b.lon_axis)
    ):
        raise AlignmentError("skill maps are not aligned")
    return SkillMap(a.values - b.values, a.lat_axis, a.lon_axis, f"{a.metric}_diff", a.threshold)


def summary_rows(pred: GridField, obs: GridField, thresholds: Sequence[float], model: str = "model",
                 feature: str | None = None) -> list[dict]:
    """Spatial-average R and RMSE plus event scores per threshold, as
    ``(model, metric, threshold, value)`` rows."""
    rows = []
    for metric in CONTINUOUS:
        rows.append(dict(model=model, metric=metric, threshold=None,
                         value=skill_map(pred, obs, metric, feature=feature).average))
    rows.append(dict(model=model, metric="r_pooled", threshold=None, value=pooled_score(pred, obs, "r", feature=feature)))
    rows.append(dict(model=model, metric="rmse_pooled", threshold=None,
                     value=pooled_score(pred, obs, "rmse", feature=feature)))
    for thr in thresholds:
        for metric in EVENT:
            rows.append(dict(model=model, metric=metric, threshold=thr,
                             value=pooled_score(pred, obs, metric, thr, feature=feature)))
            rows.append(dict(model=model, metric=f"{metric}_map_mean", threshold=thr,
                             value=skill_map(pred, obs, metric, thr, feature=feature).average))
    return rows


# ---------------------------------------------------------------- export


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_map_csv(m: SkillMap, path: str | os.PathLike) -> None:
    """``lat,lon,value`` rows in row-major order; undefined cells as ``NA``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "value"])
        for i, lat in enumerate(m.lat_axis):
            for j, lon in enumerate(m.lon_axis):
                w.writerow([_fmt(float(lat)), _fmt(float(lon)), _fmt(float(m.values[i, j]))])


def write_scalar_csv(rows: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "threshold", "value"])
        for r in rows:
            w.writerow([r["model"], r["metric"], _fmt(r["threshold"]), _fmt(r["value"])])


# value ranges used for the gray mapping when none is given
PGM_RANGES = {"r": (-1.0, 1.0), "csi": (0.0, 1.0), "pod": (0.0, 1.0), "far": (0.0, 1.0), "ets": (-1 / 3, 1.0)}


def gray_levels(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fixed value-to-gray mapping: ``round(254 * clip((v - lo) / (hi - lo)))``
    for defined values; 255 (white) marks undefined cells."""
    if not hi > lo:
        hi = lo + 1.0
    g = np.rint(254.0 * np.clip((values - lo) / (hi - lo), 0.0, 1.0))
    return np.where(np.isnan(values), 255, g).astype(np.uint8)


def write_map_pgm(m: SkillMap, path: str | os.PathLike, lo: float | None = None, hi: float | None = None) -> None:
    """Binary P5 PGM, north (highest latitude) at the top."""
    base = m.metric.removesuffix("_diff")
    if lo is None or hi is None:
        if m.metric.endswith("_diff"):
            span = float(np.nanmax(np.abs(m.values))) if m.defined else 1.0
            dlo, dhi = -span, span
        elif base in PGM_RANGES:
            dlo, dhi = PGM_RANGES[base]
        else:
            dlo, dhi = 0.0, float(np.nanmax(m.values)) if m.defined else 1.0
        lo = dlo if lo is None else lo
        hi = dhi if hi is None else hi
    img = gray_levels(m.values, lo, hi)[::-1]
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
