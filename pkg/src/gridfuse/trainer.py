"""Two-stage fusion training: event classifier, probability injection,
regressor, and the single-stage direct variant.

Inputs are the product and predictor entries of a catalog, standardized per
cell with statistics fit on the training segment. Masked cells are fed as 0
and excluded from every loss, so their stored values never matter.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import backward, bce, mse, no_grad
from .errors import AlignmentError, ConfigError, TrainingError
from .grid import FieldCatalog, GridField
from .models import Model
from .preprocess import (
    SplitSpec,
    StandardizerStats,
    destandardize_array,
    fit_standardizer,
    make_event_labels,
    split_sequential,
    standardize,
)

EVENT_THRESHOLD = 0.1  # mm/day
STAGES = ("classifier", "regressor", "direct")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    select_best_on_validation: bool = True
    stage: str = "regressor"
    hard_mask: bool = False
    samples_per_epoch: int = 0      # temporal models: windows drawn per epoch, 0 = all
    valid_samples: int = 20000      # temporal models: fixed validation subsample, 0 = all

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("adam epsilon must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.samples_per_epoch < 0 or self.valid_samples < 0:
            raise ConfigError("sample counts must be nonnegative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, cfg: TrainConfig,
              lr: float | None = None) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and the new state.

    Raises :class:`TrainingError` without touching ``state`` when any
    gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise AlignmentError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise AlignmentError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    t = state.step + 1
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        new_p.append((p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- data


@dataclass
class PreparedData:
    """Standardized inputs plus everything needed to go back to mm/day.

    ``catalog`` holds standardized product (msp) and predictor entries and the
    standardized truth as its label; ``events`` are binary labels computed
    from raw truth.
    """

    catalog: FieldCatalog
    truth: GridField
    events: GridField
    label_stats: StandardizerStats
    input_stats: dict
    splits: tuple[range, range, range]
    input_names: tuple[str, ...]

    @property
    def mask(self) -> np.ndarray:
        return self.truth.mask


def prepare(raw: FieldCatalog, split: SplitSpec = SplitSpec(), event_threshold: float = EVENT_THRESHOLD,
            inputs: list[str] | None = None) -> PreparedData:
    """Standardize a raw catalog with training-segment statistics."""
    label = raw.label_name()
    names = inputs or raw.names("msp") + raw.names("predictor")
    if not names:
        raise ConfigError("no input entries (msp or predictor) in catalog")
    T = raw[label].data.shape[0]
    splits = split_sequential(T, split)
    if len(splits[0]) == 0:
        raise ConfigError("empty training segment")
    out = FieldCatalog()
    stats = {}
    for n in names:
        stats[n] = fit_standardizer(raw[n], splits[0])
        out.add(n, standardize(raw[n], stats[n]), raw.role(n))
    truth = raw[label]
    lstats = fit_standardizer(truth, splits[0])
    out.add(label, standardize(truth, lstats), "label")
    return PreparedData(out, truth, make_event_labels(truth, event_threshold), lstats, stats, splits,
                        tuple(names))


def input_stack(data: PreparedData, probabilities: GridField | None = None, hard_mask: bool = False) -> np.ndarray:
    """``[T, LAT, LON, C]`` model inputs with masked cells set to 0.

    The probability field, when given, is appended raw as the last channel.
    """
    x = data.catalog.stack(list(data.input_names))
    if probabilities is not None:
        if not probabilities.same_grid(data.truth) or not np.array_equal(
            probabilities.time_axis, data.truth.time_axis
        ):
            raise AlignmentError("probability field is not aligned with the catalog")
        p = probabilities.data[..., :1].astype(np.float64)
        if hard_mask:
            p = np.where(np.isnan(p), np.nan, (p >= 0.5).astype(np.float64))
        x = np.concatenate([x, p], axis=-1)
    x[:, ~data.mask, :] = 0.0
    return np.nan_to_num(x, nan=0.0)


class _Samples:
    """Maps flat sample indices to model-ready ``(x, y)`` batches.

    Spatial models take whole days; the CNN-Transformer takes the last
    ``timesteps`` days stacked into channels; temporal models take per-cell
    windows. Windows that reach before the first day repeat the first day.
    """

    def __init__(self, model: Model, x: np.ndarray, y: np.ndarray | None, mask: np.ndarray):
        cfg = model.cfg
        if x.shape[-1] * (cfg.timesteps if cfg.arch == "cnn_transformer" else 1) != cfg.in_channels:
            raise AlignmentError(
                f"model expects {cfg.in_channels} input channels, data provides {x.shape[-1]}"
                + (f" x {cfg.timesteps} steps" if cfg.arch == "cnn_transformer" else "")
            )
        self.arch = cfg.arch
        self.w = cfg.timesteps
        self.x = x
        self.y = y
        self.T = x.shape[0]
        self.cells = np.stack(np.nonzero(mask), axis=1)

    @property
    def per_cell(self) -> bool:
        return self.arch in ("transformer", "lstm")

    def indices(self, times: range) -> np.ndarray:
        t = np.arange(times.start, times.stop)
        if not self.per_cell:
            return t
        return (t[:, None] * len(self.cells) + np.arange(len(self.cells))[None, :]).reshape(-1)

    def _times(self, t: np.ndarray) -> np.ndarray:
        return np.clip(t[:, None] + np.arange(-self.w + 1, 1)[None, :], 0, None)

    def inputs(self, idx: np.ndarray) -> np.ndarray:
        if self.arch in ("unet", "transunet"):
            return self.x[idx]
        if self.arch == "cnn_transformer":
            win = self.x[self._times(idx)]  # [n, w, H, W, C]
            n, w, H, W, C = win.shape
            return win.transpose(0, 2, 3, 1, 4).reshape(n, H, W, w * C)
        t, c = np.divmod(idx, len(self.cells))
        i, j = self.cells[c, 0], self.cells[c, 1]
        return self.x[self._times(t), i[:, None], j[:, None], :]

    def targets(self, idx: np.ndarray) -> np.ndarray:
        if not self.per_cell:
            return self.y[idx]
        t, c = np.divmod(idx, len(self.cells))
        return self.y[t, self.cells[c, 0], self.cells[c, 1]]

    def scatter(self, pred: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
        """Write model outputs for ``idx`` into a ``[T, LAT, LON, 1]`` array."""
        if not self.per_cell:
            out[idx] = pred
            return
        t, c = np.divmod(idx, len(self.cells))
        out[t, self.cells[c, 0], self.cells[c, 1]] = pred


# ---------------------------------------------------------------- run record


@dataclass
class RunRecord:
    stage: str
    epochs: list = field(default_factory=list)  # (epoch, train_loss, valid_loss)
    best_epoch: int = -1
    checkpoint: str | None = None
    wall_time: float = 0.0
    lr_halved: bool = False
    steps: int = 0

    @property
    def train_losses(self) -> list[float]:
        return [e[1] for e in self.epochs]

    @property
    def valid_losses(self) -> list[float]:
        return [e[2] for e in self.epochs]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_loss"])
            for e, tl, vl in self.epochs:
                w.writerow([e, repr(float(tl)), "NA" if vl is None or math.isnan(vl) else repr(float(vl))])


# ---------------------------------------------------------------- loop


def _loss(model: Model, x: np.ndarray, y: np.ndarray):
    out = model.forward(x)
    y = y.reshape(out.shape)
    valid = ~np.isnan(y)
    return (bce if model.classifier else mse)(out, y, valid)


def _eval_loss(model: Model, samples: _Samples, idx: np.ndarray, batch: int) -> float:
    """Valid-entry mean of the loss over ``idx`` without recording a graph."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s : s + batch]
            y = samples.targets(b)
            n = int(np.count_nonzero(~np.isnan(y)))
            if n:
                total += float(_loss(model, samples.inputs(b), y).data) * n
                count += n
    return total / count if count else float("nan")


def fit(model: Model, samples: _Samples, splits, cfg: TrainConfig) -> RunRecord:
    """Adam over seeded shuffles of the training segment, tracking the best
    validation epoch."""
    train_idx = samples.indices(splits[0])
    valid_idx = samples.indices(splits[1])
    if len(train_idx) == 0:
        raise ConfigError("empty training segment")
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, valid_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if samples.per_cell and cfg.valid_samples and len(valid_idx) > cfg.valid_samples:
        valid_idx = np.sort(valid_rng.choice(valid_idx, cfg.valid_samples, replace=False))
    batch = cfg.batch_size
    params = model.parameters()
    state = AdamState.zeros([p.data for p in params])
    lr = cfg.learning_rate
    rec = RunRecord(cfg.stage)
    best, best_state = math.inf, None
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        if samples.per_cell and cfg.samples_per_epoch:
            order = order[: cfg.samples_per_epoch]
        total, count = 0.0, 0
        for s in range(0, len(order), batch):
            b = order[s : s + batch]
            y = samples.targets(b)
            n = int(np.count_nonzero(~np.isnan(y)))
            if n == 0:
                continue
            model.zero_grad()
            loss = _loss(model, samples.inputs(b), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, step {rec.steps}")
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            try:
                new, state = adam_step([p.data for p in params], grads, state, cfg, lr)
            except TrainingError:
                if rec.lr_halved:
                    raise TrainingError(
                        f"second non-finite gradient at epoch {epoch}, step {rec.steps}; run aborted"
                    ) from None
                rec.lr_halved = True
                lr *= 0.5
                continue
            for p, a in zip(params, new):
                p.data = a
            rec.steps += 1
            total += value * n
            count += n
        train_loss = total / count if count else float("nan")
        if not math.isfinite(train_loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        valid_loss = _eval_loss(model, samples, valid_idx, batch * 8) if len(valid_idx) else float("nan")
        rec.epochs.append((epoch, train_loss, valid_loss))
        score = valid_loss if cfg.select_best_on_validation and math.isfinite(valid_loss) else -epoch
        if score <= best or best_state is None:
            best, best_state = score, model.state_dict()
            rec.best_epoch = epoch
    if cfg.select_best_on_validation and best_state is not None:
        model.load_state_dict(best_state)
    else:
        rec.best_epoch = cfg.epochs
    rec.wall_time = time.perf_counter() - t0
    return rec


def predict_field(model: Model, samples: _Samples, T: int, mask: np.ndarray, batch: int = 64) -> np.ndarray:
    """Model outputs for every day and valid cell as ``[T, LAT, LON]``; NaN at
    masked cells."""
    out = np.full((T, *mask.shape, 1), np.nan)
    idx = samples.indices(range(T))
    step = batch if not samples.per_cell else batch * 64
    for s in range(0, len(idx), step):
        b = idx[s : s + step]
        samples.scatter(model.predict(samples.inputs(b), batch_size=step), b, out)
    out = out[..., 0]
    out[:, ~mask] = np.nan
    return out


# ---------------------------------------------------------------- stages


def _stage_cfg(cfg: TrainConfig, stage: str) -> TrainConfig:
    return cfg if cfg.stage == stage else replace(cfg, stage=stage)


def _check_mode(model: Model, mode: str):
    if model.cfg.head_mode != mode:
        raise ConfigError(f"model head_mode is {model.cfg.head_mode!r}, this stage needs {mode!r}")


def train_stage1_classifier(data: PreparedData, model: Model, cfg: TrainConfig):
    """Fit the event classifier with masked BCE; returns the model, its run
    record and the daily event probability for every day."""
    _check_mode(model, "classifier")
    cfg = _stage_cfg(cfg, "classifier")
    x = input_stack(data)
    y = data.events.data[..., 0].astype(np.float64)
    samples = _Samples(model, x, y, data.mask)
    rec = fit(model, samples, data.splits, cfg)
    prob = predict_field(model, samples, x.shape[0], data.mask, cfg.batch_size)
    field = data.truth.replace(data=prob[..., None].astype(np.float32), feature_names=("probability",))
    return model, rec, field


def _regress(data: PreparedData, model: Model, cfg: TrainConfig, probabilities):
    _check_mode(model, "regressor")
    x = input_stack(data, probabilities, cfg.hard_mask)
    y = data.catalog[data.catalog.label_name()].data[..., 0].astype(np.float64)
    samples = _Samples(model, x, y, data.mask)
    return model, fit(model, samples, data.splits, cfg)


def train_stage2_regressor(data: PreparedData, probabilities: GridField, model: Model, cfg: TrainConfig):
    """Fit the regressor on the inputs plus the classifier probability channel."""
    if probabilities is None:
        raise AlignmentError("stage 2 needs a probability field")
    return _regress(data, model, _stage_cfg(cfg, "regressor"), probabilities)


def train_direct(data: PreparedData, model: Model, cfg: TrainConfig):
    """Fit the regressor on the inputs alone."""
    return _regress(data, model, _stage_cfg(cfg, "direct"), None)


def predict_precipitation(model: Model, data: PreparedData, probabilities: GridField | None = None,
                          hard_mask: bool = False, batch: int = 64) -> tuple[GridField, int]:
    """Destandardized precipitation (mm/day) for every day.

    Negative values are clamped to 0; the number of clamped valid entries is
    returned alongside the field. Masked cells stay NaN.
    """
    _check_mode(model, "regressor")
    x = input_stack(data, probabilities, hard_mask)
    z = predict_field(model, _Samples(model, x, None, data.mask), x.shape[0], data.mask, batch)
    mm = destandardize_array(z, data.label_stats)
    neg = mm < 0
    clamped = int(np.count_nonzero(neg))
    mm = np.where(neg, 0.0, mm)
    return data.truth.replace(data=mm[..., None].astype(np.float32)), clamped
