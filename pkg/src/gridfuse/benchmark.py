"""Seeded synthetic benchmark comparing fusion variants against the product
ensemble mean on the held-out test segment."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evalkit, synth, trainer
from .grid import GridField, ensemble_mean
from .models import ModelConfig, build_model

# reduced-width variants that train in minutes on one core
SPATIAL = dict(base_channels=8, depth=2)
ATTN = dict(transformer_layers=1, heads=2, ff_width=64)
TEMPORAL = dict(d_model=16, heads=2, ff_width=64, dense_width=64, transformer_layers=1, timesteps=5)
LSTM = dict(lstm_hidden=16, dense_width=64, timesteps=5)
CNNT = dict(cnn_channels=(8, 16, 16, 16), cnn_pools=2, transformer_layers=1, heads=2, ff_width=64, timesteps=3)

VARIANTS = {
    # name: (classifier arch, regressor arch, arch kwargs); classifier None = direct
    "transunet_hybrid": ("transunet", "transunet", {**SPATIAL, **ATTN}),
    "transunet_direct": (None, "transunet", {**SPATIAL, **ATTN}),
    "unet_hybrid": ("unet", "unet", SPATIAL),
    "transformer_hybrid": ("transformer", "transformer", TEMPORAL),
    "lstm_hybrid": ("lstm", "lstm", LSTM),
    "cnn_transformer_hybrid": ("cnn_transformer", "cnn_transformer", CNNT),
}
DEFAULT_VARIANTS = ("transunet_hybrid", "transunet_direct", "unet_hybrid", "transformer_hybrid")


@dataclass(frozen=True)
class BenchmarkConfig:
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)
    variants: tuple = DEFAULT_VARIANTS
    epochs: int = 50
    batch_size: int = 16
    temporal_batch: int = 256
    samples_per_epoch: int = 20000
    seed: int = 0
    heavy_quantile: float = 95.0
    top_fraction: float = 0.1


def _model_cfg(arch: str, mode: str, in_ch: int, kw: dict, data, seed: int) -> ModelConfig:
    extra = {}
    if arch == "cnn_transformer":
        H, W = data.mask.shape
        extra = dict(height=H, width=W)
        in_ch = in_ch * kw["timesteps"]
    return ModelConfig(arch=arch, head_mode=mode, in_channels=in_ch, seed=seed, **kw, **extra)


def _train_cfg(cfg: BenchmarkConfig, arch: str, stage: str, seed: int) -> trainer.TrainConfig:
    temporal = arch in ("transformer", "lstm")
    return trainer.TrainConfig(
        epochs=cfg.epochs, seed=seed, stage=stage,
        batch_size=cfg.temporal_batch if temporal else cfg.batch_size,
        samples_per_epoch=cfg.samples_per_epoch if temporal else 0,
    )


def _seeds(seed: int, name: str) -> tuple[int, int, int, int]:
    """Per-variant model and shuffle seeds, independent of variant order."""
    key = [seed] + [ord(c) for c in name]
    return tuple(int(s.generate_state(1)[0]) for s in np.random.SeedSequence(key).spawn(4))


def top_signed_error(pred: GridField, truth: GridField, fraction: float) -> float:
    """Mean of ``pred - truth`` over the top ``fraction`` of valid truth values."""
    t = truth.data[:, truth.mask, 0].astype(np.float64).ravel()
    p = pred.data[:, pred.mask, 0].astype(np.float64).ravel()
    cut = np.quantile(t, 1 - fraction)
    sel = t >= cut
    return float(np.mean(p[sel] - t[sel]))


def scores(pred: GridField, truth: GridField, heavy: float, fraction: float) -> dict:
    return {
        "r": evalkit.skill_map(pred, truth, "r").average,
        "rmse": evalkit.skill_map(pred, truth, "rmse").average,
        "r_pooled": evalkit.pooled_score(pred, truth, "r"),
        "csi_event": evalkit.pooled_score(pred, truth, "csi", trainer.EVENT_THRESHOLD),
        "ets_heavy": evalkit.pooled_score(pred, truth, "ets", heavy),
        "top_signed_error": top_signed_error(pred, truth, fraction),
    }


def classifier_scores(prob: GridField, events: GridField) -> dict:
    """Pooled CSI of the 0.5-thresholded classifier and of the constant
    always-rain and never-rain forecasts."""
    o = events.data[:, events.mask, 0]
    p = prob.data[:, prob.mask, 0]
    ev = evalkit.events
    return {
        "csi": evalkit.csi(evalkit.contingency(ev(p, 0.5), o)),
        "csi_always": evalkit.csi(evalkit.contingency(np.ones_like(o), o)),
        "csi_never": evalkit.csi(evalkit.contingency(np.zeros_like(o), o)),
    }


def run(cfg: BenchmarkConfig = BenchmarkConfig(), log=print) -> dict:
    """Train every variant and score it on the test segment."""
    t0 = time.perf_counter()
    raw = synth.generate(cfg.synth)
    data = trainer.prepare(raw)
    test = data.splits[2]
    sl = slice(test.start, test.stop)
    truth = data.truth.isel_time(sl)
    heavy = synth.heavy_threshold(truth, cfg.heavy_quantile)
    products = [raw[n] for n in raw.names("msp")]
    em = ensemble_mean(products, products[0].feature_names[0]).isel_time(sl)
    out = {
        "config": {"synth": {k: v for k, v in asdict(cfg.synth).items() if k != "recipes"},
                   **{k: v for k, v in asdict(cfg).items() if k != "synth"}},
        "heavy_threshold": heavy,
        "synth": synth.describe(raw),
        "baseline": scores(em, truth, heavy, cfg.top_fraction),
        "models": {},
    }
    n_in = len(data.input_names)
    for name in cfg.variants:
        cls_arch, reg_arch, kw = VARIANTS[name]
        s_cm, s_ct, s_rm, s_rt = _seeds(cfg.seed, name)
        row, t1 = {}, time.perf_counter()
        prob = None
        if cls_arch is not None:
            clf = build_model(_model_cfg(cls_arch, "classifier", n_in, kw, data, s_cm))
            clf, rec_c, prob = trainer.train_stage1_classifier(data, clf, _train_cfg(cfg, cls_arch, "classifier", s_ct))
            row["classifier"] = classifier_scores(prob.isel_time(sl), data.events.isel_time(sl))
            row["classifier_best_epoch"] = rec_c.best_epoch
            reg = build_model(_model_cfg(reg_arch, "regressor", n_in + 1, kw, data, s_rm))
            reg, rec = trainer.train_stage2_regressor(data, prob, reg, _train_cfg(cfg, reg_arch, "regressor", s_rt))
        else:
            reg = build_model(_model_cfg(reg_arch, "regressor", n_in, kw, data, s_rm))
            reg, rec = trainer.train_direct(data, reg, _train_cfg(cfg, reg_arch, "direct", s_rt))
        pred, clamped = trainer.predict_precipitation(reg, data, prob)
        row.update(scores(pred.isel_time(sl), truth, heavy, cfg.top_fraction))
        row.update(best_epoch=rec.best_epoch, clamped=clamped, n_params=reg.n_params,
                   seconds=time.perf_counter() - t1, train_loss=rec.train_losses)
        out["models"][name] = row
        log(f"{name}: r={row['r']:.4f} rmse={row['rmse']:.4f} ets_heavy={row['ets_heavy']:.4f} "
            f"top_err={row['top_signed_error']:.3f} ({row['seconds']:.0f}s)")
    out["seconds"] = time.perf_counter() - t0
    return out


def check(result: dict) -> dict[str, bool]:
    """The ordinal claims, each as a named boolean."""
    base = result["baseline"]
    models = result["models"]
    c = {}
    c["a_r_above_baseline"] = all(m["r"] > base["r"] for m in models.values())
    c["a_transunet_rmse_below_baseline"] = all(
        m["rmse"] < base["rmse"] for n, m in models.items() if n.startswith("transunet")
    )
    h, d = models.get("transunet_hybrid"), models.get("transunet_direct")
    if h and d:
        c["b_hybrid_r_ge_direct"] = h["r"] >= d["r"]
        c["b_hybrid_heavy_ets_ge_direct"] = h["ets_heavy"] >= d["ets_heavy"]
        c["c_direct_underestimates_top_decile_more"] = d["top_signed_error"] < h["top_signed_error"]
    c["d_classifier_beats_constant_forecasts"] = all(
        m["classifier"]["csi"] > max(m["classifier"]["csi_always"], m["classifier"]["csi_never"])
        for m in models.values() if "classifier" in m
    )
    return c


def dumps(result: dict) -> str:
    return json.dumps(result, indent=1, sort_keys=True, default=float)


def quick(epochs: int, variants=DEFAULT_VARIANTS, **kw) -> BenchmarkConfig:
    return replace(BenchmarkConfig(), epochs=epochs, variants=tuple(variants), **kw)
