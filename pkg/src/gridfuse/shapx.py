"""Interventional Shapley attribution.

The value of a coalition ``S`` is the model output with the features in ``S``
taken from the explained sample and the rest from a background sample,
averaged over the background set. Exact mode enumerates all ``2**n``
coalitions; sampled mode walks random feature permutations.

Models are plain callables mapping ``[m, n]`` feature rows to ``[m]``
outputs, so any network can be wrapped (see :class:`CellModel`). Optional
``groups`` make each player a set of features that switch together, e.g. one
input channel across every step of a temporal window.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, ModeError, ShapeError
from .models import Model

MAX_EXACT_FEATURES = 15
EVAL_CHUNK = 65536  # rows per model call


@dataclass(frozen=True)
class AttributionQuery:
    model: Callable[[np.ndarray], np.ndarray]
    x: np.ndarray            # [n]
    background: np.ndarray   # [b, n]
    mode: str = "exact"
    permutations: int = 1000
    seed: int = 0
    groups: tuple | None = None  # player k owns feature indices groups[k]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        bg = np.asarray(self.background, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError(f"sample must be a feature vector, got shape {x.shape}")
        if bg.ndim != 2 or bg.shape[0] == 0:
            raise ShapeError("background set must be a nonempty [b, n] array")
        if bg.shape[1] != x.shape[0]:
            raise AlignmentError(f"background has {bg.shape[1]} features, sample has {x.shape[0]}")
        if self.mode not in ("exact", "sampled"):
            raise ConfigError(f"mode must be 'exact' or 'sampled', got {self.mode!r}")
        if self.groups is not None:
            groups = tuple(tuple(int(i) for i in g) for g in self.groups)
            flat = sorted(i for g in groups for i in g)
            if flat != list(range(x.shape[0])) or any(len(g) == 0 for g in groups):
                raise AlignmentError("groups must partition the feature indices")
            object.__setattr__(self, "groups", groups)
        n = x.shape[0] if self.groups is None else len(self.groups)
        if self.mode == "exact" and n > MAX_EXACT_FEATURES:
            raise ModeError(
                f"exact mode supports at most {MAX_EXACT_FEATURES} features, got {n}; use sampled mode"
            )
        if self.mode == "sampled" and self.permutations < 1:
            raise ConfigError("sampled mode needs at least one permutation")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "background", bg)

    @property
    def n(self) -> int:
        """Number of players."""
        return self.x.shape[0] if self.groups is None else len(self.groups)

    @property
    def owner(self) -> np.ndarray:
        """Player index of every feature."""
        if self.groups is None:
            return np.arange(self.x.shape[0])
        own = np.empty(self.x.shape[0], dtype=np.int64)
        for k, g in enumerate(self.groups):
            own[list(g)] = k
        return own

    def player_values(self) -> np.ndarray:
        """One representative value per player (the last feature it owns)."""
        if self.groups is None:
            return self.x.copy()
        return np.array([self.x[g[-1]] for g in self.groups])


@dataclass(frozen=True)
class AttributionReport:
    phi0: float             # mean model output over the background
    phi: np.ndarray         # [n]
    fx: float               # model output at the sample
    x: np.ndarray           # [n] player values (grouped: last owned feature)
    mode: str
    stderr: np.ndarray | None = None
    residual: float = 0.0   # f(x) - phi0 - sum(phi) before any adjustment
    adjusted: bool = False  # residual was spread over the features

    @property
    def local_accuracy_gap(self) -> float:
        return float(self.fx - self.phi0 - self.phi.sum())

    @property
    def percent(self) -> np.ndarray:
        return _percent(np.abs(self.phi))


def _percent(weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if total == 0:
        return np.full(weights.shape, np.nan)
    return 100.0 * weights / total


def _evaluate(f, rows: np.ndarray) -> np.ndarray:
    out = np.empty(rows.shape[0])
    for s in range(0, rows.shape[0], EVAL_CHUNK):
        y = np.asarray(f(rows[s : s + EVAL_CHUNK]), dtype=np.float64).reshape(-1)
        if y.shape[0] != min(EVAL_CHUNK, rows.shape[0] - s):
            raise ShapeError("model must return one output per input row")
        out[s : s + y.shape[0]] = y
    return out


def _shapley_weights(n: int) -> np.ndarray:
    """``w[s] = s! (n - s - 1)! / n!`` for coalition sizes 0..n-1."""
    return np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])


def coalition_values(q: AttributionQuery) -> np.ndarray:
    """``v[S]`` for every coalition bitmask ``S`` (bit i set = feature i from x)."""
    n, b, d = q.n, q.background.shape[0], q.x.shape[0]
    masks = np.arange(1 << n)
    take = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)[:, q.owner]  # [2^n, d]
    v = np.empty(1 << n)
    per = max(1, EVAL_CHUNK // b)
    for s in range(0, 1 << n, per):
        t = take[s : s + per]
        rows = np.where(t[:, None, :], q.x[None, None, :], q.background[None, :, :])  # [m, b, d]
        v[s : s + per] = _evaluate(q.model, rows.reshape(-1, d)).reshape(-1, b).mean(axis=1)
    return v


def shapley_exact(q: AttributionQuery) -> AttributionReport:
    """Exact interventional Shapley values by full coalition enumeration."""
    if q.mode != "exact":
        q = AttributionQuery(q.model, q.x, q.background, "exact", q.permutations, q.seed, q.groups)
    n = q.n
    v = coalition_values(q)
    masks = np.arange(1 << n)
    size = np.array([bin(m).count("1") for m in masks])
    w = _shapley_weights(n)
    phi = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.sum(w[size[without]] * (v[without | (1 << i)] - v[without])))
    fx = float(v[-1])
    phi0 = float(v[0])
    return AttributionReport(phi0, phi, fx, q.player_values(), "exact", None, fx - phi0 - phi.sum(), False)


def shapley_sampled(q: AttributionQuery) -> AttributionReport:
    """Permutation-sampling estimate with per-feature standard errors.

    Permutation ``p`` is paired with background sample ``p % b`` so the
    background is covered evenly. Any remaining local-accuracy gap is spread
    over the features in proportion to ``|phi|`` and flagged.
    """
    n, P, d = q.n, q.permutations, q.x.shape[0]
    bg = q.background
    b = bg.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(q.seed))
    perms = np.argsort(rng.random((P, n)), axis=1)
    ref = bg[np.arange(P) % b]  # [P, n]
    # path rows: step k has the first k permuted features switched to x
    rank = np.empty_like(perms)
    rank[np.arange(P)[:, None], perms] = np.arange(n)[None, :]
    steps = np.arange(n + 1)
    on = (rank[:, None, :] < steps[None, :, None])[:, :, q.owner]  # [P, n+1, d]
    rows = np.where(on, q.x[None, None, :], ref[:, None, :])
    vals = _evaluate(q.model, rows.reshape(-1, d)).reshape(P, n + 1)
    deltas = np.diff(vals, axis=1)  # contribution of perms[:, k]
    contrib = np.empty((P, n))
    contrib[np.arange(P)[:, None], perms] = deltas
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.full(n, np.nan)
    fx = float(_evaluate(q.model, q.x[None, :])[0])
    phi0 = float(_evaluate(q.model, bg).mean())
    residual = fx - phi0 - float(phi.sum())
    adjusted = False
    if abs(residual) > 1e-12 * max(1.0, abs(fx), abs(phi0)):
        a = np.abs(phi)
        share = a / a.sum() if a.sum() > 0 else np.full(n, 1.0 / n)
        phi = phi + residual * share
        adjusted = True
    return AttributionReport(phi0, phi, fx, q.player_values(), "sampled", se, residual, adjusted)


def explain(q: AttributionQuery) -> AttributionReport:
    return shapley_exact(q) if q.mode == "exact" else shapley_sampled(q)


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class AttributionSummary:
    feature_names: tuple[str, ...]
    mean_phi: np.ndarray
    mean_abs_phi: np.ndarray
    percent: np.ndarray       # share of mean |phi|, sums to 100
    values: np.ndarray        # [samples, n] feature values
    phis: np.ndarray          # [samples, n]
    sample_ids: tuple = field(default=())

    def ranking(self) -> list[str]:
        order = np.argsort(-self.mean_abs_phi, kind="stable")
        return [self.feature_names[i] for i in order]


def aggregate_attribution(reports: Sequence[AttributionReport], feature_names: Sequence[str],
                          sample_ids: Sequence | None = None) -> AttributionSummary:
    """Average per-sample attributions over samples (and thus over cells)."""
    if not reports:
        raise ConfigError("aggregation needs at least one report")
    n = len(feature_names)
    for r in reports:
        if r.phi.shape != (n,):
            raise AlignmentError(f"report has {r.phi.shape[0]} features, expected {n}")
    phis = np.stack([r.phi for r in reports])
    values = np.stack([r.x for r in reports])
    mean_abs = np.abs(phis).mean(axis=0)
    ids = tuple(sample_ids) if sample_ids is not None else tuple(range(len(reports)))
    return AttributionSummary(tuple(feature_names), phis.mean(axis=0), mean_abs, _percent(mean_abs),
                              values, phis, ids)


def write_summary_csv(s: AttributionSummary, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean_phi", "mean_abs_phi", "percent"])
        for k, name in enumerate(s.feature_names):
            w.writerow([name, repr(float(s.mean_phi[k])), repr(float(s.mean_abs_phi[k])), repr(float(s.percent[k]))])


def write_long_csv(s: AttributionSummary, path: str | os.PathLike) -> None:
    """One row per (sample, feature) for beeswarm-style plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "feature", "value", "phi"])
        for r, sid in enumerate(s.sample_ids):
            for k, name in enumerate(s.feature_names):
                w.writerow([sid, name, repr(float(s.values[r, k])), repr(float(s.phis[r, k]))])


# ---------------------------------------------------------------- model wrappers


class CellModel:
    """A spatial model seen as a function of one cell's input channels.

    Every other cell keeps the day's actual inputs; the output is the model's
    prediction at that same cell, optionally mapped by ``scale * y + offset``.
    """

    def __init__(self, model: Model, day: np.ndarray, i: int, j: int, scale: float = 1.0, offset: float = 0.0,
                 batch: int = 256):
        if day.ndim != 3:
            raise ShapeError(f"day input must be [LAT, LON, C], got {day.shape}")
        if not model.spatial:
            raise ConfigError("CellModel wraps spatial models only")
        self.model, self.day, self.i, self.j = model, day, i, j
        self.scale, self.offset, self.batch = scale, offset, batch

    @property
    def n_features(self) -> int:
        return self.day.shape[-1]

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        out = np.empty(rows.shape[0])
        for s in range(0, rows.shape[0], self.batch):
            r = rows[s : s + self.batch]
            x = np.repeat(self.day[None], r.shape[0], axis=0)
            x[:, self.i, self.j, :] = r
            y = self.model.predict(x, batch_size=self.batch)[:, self.i, self.j, 0]
            out[s : s + r.shape[0]] = self.scale * y + self.offset
        return out


def channel_groups(timesteps: int, channels: int) -> tuple:
    """Players for a flattened ``[timesteps, channels]`` window: one per channel."""
    return tuple(tuple(t * channels + c for t in range(timesteps)) for c in range(channels))


class RowModel:
    """A temporal model seen as a function of its flattened ``[w * C]`` window;
    pair it with :func:`channel_groups`."""

    def __init__(self, model: Model, batch: int = 4096):
        if model.spatial:
            raise ConfigError("RowModel wraps temporal models only")
        self.model, self.batch = model, batch

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        w, c = self.model.cfg.timesteps, self.model.cfg.in_channels
        x = np.asarray(rows, dtype=np.float64).reshape(-1, w, c)
        return self.model.predict(x, batch_size=self.batch)[:, 0]
