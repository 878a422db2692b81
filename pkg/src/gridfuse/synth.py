"""Seeded synthetic world: truth precipitation, six biased product proxies and
coupled physical predictors.

Truth comes from a latent Gaussian field ``z`` (spatially smoothed white
noise, AR(1) in time, plus a smooth wet/dry climatology). Rain falls where
``z`` exceeds a threshold chosen to hit ``event_rate``; amounts grow
exponentially above the threshold, which gives zero inflation and a heavy
tail.

Every random draw for day ``t`` comes from its own generator seeded with
``SeedSequence([seed, t])``, so days can be drawn in any order or in parallel
and the catalog is bitwise the same. Only the AR recurrences run serially.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq
from scipy.stats import norm

from . import evalkit
from .errors import ConfigError
from .grid import FieldCatalog, GridField

PRODUCTS = ("C_R", "E_P", "G_P", "GS_P", "M_P", "P_C")
PREDICTORS = ("SP", "T2M", "D2M", "SM")


@dataclass(frozen=True)
class ProxyRecipe:
    """How one product deviates from truth.

    The identity recipe (all defaults) reproduces truth exactly.
    """

    bias: float = 1.0           # multiplicative bias
    mult_sigma: float = 0.0     # lognormal, mean-preserving amount noise
    add_sigma: float = 0.0      # additive noise (mm/day), clipped at 0
    shift: int = 0              # spatial displacement in cells (lat and lon)
    miss_rate: float = 0.0      # fraction of rain cells reported dry
    false_rate: float = 0.0     # fraction of dry cells reported wet
    false_amount: float = 2.0   # mean of false-alarm amounts (mm/day)


DEFAULT_RECIPES = {
    "C_R": ProxyRecipe(bias=0.8, mult_sigma=1.2, add_sigma=1.2, shift=1, miss_rate=0.30, false_rate=0.20),
    "E_P": ProxyRecipe(bias=1.1, mult_sigma=1.0, add_sigma=1.0, shift=1, miss_rate=0.15, false_rate=0.35),
    "G_P": ProxyRecipe(bias=1.0, mult_sigma=1.1, add_sigma=1.0, shift=1, miss_rate=0.25, false_rate=0.25),
    "GS_P": ProxyRecipe(bias=0.7, mult_sigma=1.2, add_sigma=1.0, shift=1, miss_rate=0.30, false_rate=0.20),
    "M_P": ProxyRecipe(bias=1.0, mult_sigma=1.0, add_sigma=1.0, shift=2, miss_rate=0.20, false_rate=0.25),
    "P_C": ProxyRecipe(bias=1.3, mult_sigma=1.3, add_sigma=1.2, shift=1, miss_rate=0.30, false_rate=0.30),
}


@dataclass(frozen=True)
class SynthConfig:
    n_time: int = 2000
    n_lat: int = 32
    n_lon: int = 32
    seed: int = 0
    event_rate: float = 0.4
    corr_length: float = 3.0        # gaussian smoothing sigma, cells
    temporal_ar: float = 0.6
    intensity_scale: float = 4.0    # mm/day
    intensity_growth: float = 1.0   # exponent slope above the rain threshold
    wet_gradient: float = 0.6       # climatological latent shift across the domain
    sea_radius: float = 0.35        # masked quarter disc in the low-lat/low-lon corner
    sp_coupling: float = 0.6
    t2m_coupling: float = 0.3
    d2m_coupling: float = 0.6
    sm_memory: float = 0.85
    error_corr_length: float = 2.0  # smoothing sigma of product errors, cells (0 = white)
    noise_channel: bool = False
    recipes: dict = field(default_factory=lambda: dict(DEFAULT_RECIPES))

    def __post_init__(self):
        if self.n_time < 50 or self.n_lat < 8 or self.n_lon < 8:
            raise ConfigError(
                f"synthetic extents must be at least (50, 8, 8), got ({self.n_time}, {self.n_lat}, {self.n_lon})"
            )
        if not 0 < self.event_rate < 1:
            raise ConfigError("event_rate must lie in (0, 1)")
        if not 0 <= self.temporal_ar < 1:
            raise ConfigError("temporal_ar must lie in [0, 1)")
        if set(self.recipes) != set(PRODUCTS):
            raise ConfigError(f"recipes must cover exactly {PRODUCTS}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "recipes"]


def _axes(cfg: SynthConfig):
    return (
        np.arange(cfg.n_time, dtype=np.float64),
        30.0 + 0.25 * np.arange(cfg.n_lat),
        100.0 + 0.25 * np.arange(cfg.n_lon),
    )


def land_mask(cfg: SynthConfig) -> np.ndarray:
    i = np.arange(cfg.n_lat)[:, None] / cfg.n_lat
    j = np.arange(cfg.n_lon)[None, :] / cfg.n_lon
    return ~(i * i + j * j < cfg.sea_radius ** 2)


def climatology(cfg: SynthConfig) -> np.ndarray:
    """Smooth latent offset: wetter toward high lat index and high lon index."""
    i = np.arange(cfg.n_lat)[:, None] / max(cfg.n_lat - 1, 1)
    j = np.arange(cfg.n_lon)[None, :] / max(cfg.n_lon - 1, 1)
    return cfg.wet_gradient * (i + j - 1.0)


def rain_threshold(cfg: SynthConfig, clim: np.ndarray, mask: np.ndarray) -> float:
    """Latent level whose exceedance rate, averaged over land cells, is ``event_rate``."""
    c = clim[mask]
    return brentq(lambda q: float(norm.sf(q - c).mean()) - cfg.event_rate, -10.0, 10.0, xtol=1e-12)


def _smoothing_scale(cfg: SynthConfig, sigma: float) -> float:
    if sigma <= 0:
        return 1.0
    delta = np.zeros((cfg.n_lat, cfg.n_lon))
    delta[0, 0] = 1.0
    k = gaussian_filter(delta, sigma, mode="wrap")
    return float(np.sqrt((k * k).sum()))


def _coherent(white: np.ndarray, sigma: float, scale: float) -> np.ndarray:
    """Unit-variance, spatially correlated version of a white field."""
    return gaussian_filter(white, sigma, mode="wrap") / scale if sigma > 0 else white


def _slice_draws(cfg: SynthConfig, t: int, scale: float, err_scale: float) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, t]))
    shape = (cfg.n_lat, cfg.n_lon)
    d = {"innov": gaussian_filter(rng.standard_normal(shape), cfg.corr_length, mode="wrap") / scale}
    for name in PRODUCTS:
        g = [_coherent(rng.standard_normal(shape), cfg.error_corr_length, err_scale) for _ in range(4)]
        # miss and false-alarm draws stay uniform on [0, 1) after smoothing
        d[name] = (g[0], g[1], norm.cdf(g[2]), norm.cdf(g[3]), rng.exponential(1.0, shape))
    for name in PREDICTORS + ("NOISE",):
        # predictor noise shares the latent field's spatial scale, so smoothing cannot remove it
        d[name] = _coherent(rng.standard_normal(shape), cfg.corr_length, scale)
    return d


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GRIDFUSE_THREADS", "1")))
    except ValueError:
        return 1


def apply_recipe(truth: np.ndarray, r: ProxyRecipe, draws) -> np.ndarray:
    """Degrade a ``[T, LAT, LON]`` truth array with one recipe."""
    e_mult, e_add, u_miss, u_false, amt = draws
    x = np.roll(truth, (r.shift, r.shift), axis=(1, 2)) if r.shift else truth.copy()
    wet = x > 0
    if r.mult_sigma:
        x = x * np.exp(r.mult_sigma * e_mult - 0.5 * r.mult_sigma ** 2)
    if r.miss_rate:
        x = np.where(wet & (u_miss < r.miss_rate), 0.0, x)
    if r.false_rate:
        x = np.where(~wet & (u_false < r.false_rate), r.false_amount * amt, x)
    if r.add_sigma:
        x = np.maximum(x + r.add_sigma * e_add * (x > 0), 0.0)
    return r.bias * x


def generate(cfg: SynthConfig, threads: int | None = None) -> FieldCatalog:
    """Build the catalog: ``truth`` (label), six product proxies (msp) and the
    predictors SP, T2M, D2M, SM (plus NOISE when enabled)."""
    T, H, W = cfg.n_time, cfg.n_lat, cfg.n_lon
    scale = _smoothing_scale(cfg, cfg.corr_length)
    err_scale = _smoothing_scale(cfg, cfg.error_corr_length)
    n = threads or _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            draws = list(ex.map(lambda t: _slice_draws(cfg, t, scale, err_scale), range(T)))
    else:
        draws = [_slice_draws(cfg, t, scale, err_scale) for t in range(T)]

    def stacked(key, k=None):
        return np.stack([d[key] if k is None else d[key][k] for d in draws])

    innov = stacked("innov")
    a = cfg.temporal_ar
    z = np.empty((T, H, W))
    z[0] = innov[0]
    for t in range(1, T):
        z[t] = a * z[t - 1] + np.sqrt(1 - a * a) * innov[t]
    clim = climatology(cfg)
    mask = land_mask(cfg)
    q = rain_threshold(cfg, clim, mask)
    excess = z + clim - q
    truth = np.where(excess > 0, cfg.intensity_scale * np.expm1(cfg.intensity_growth * np.clip(excess, 0, None)), 0.0)

    time_axis, lat, lon = _axes(cfg)

    def gf(arr, name):
        return GridField(arr[..., None], time_axis, lat, lon, (name,), mask)

    cat = FieldCatalog()
    cat.add("truth", gf(truth, "precip"), "label")
    for name in PRODUCTS:
        proxy = apply_recipe(truth, cfg.recipes[name], tuple(stacked(name, k) for k in range(5)))
        cat.add(name, gf(proxy, "precip"), "msp")

    latent = z + clim
    sp = 1010.0 - 6.0 * (cfg.sp_coupling * latent + np.sqrt(1 - cfg.sp_coupling ** 2) * stacked("SP"))
    t2m = 288.0 + 4.0 * (cfg.t2m_coupling * latent + np.sqrt(1 - cfg.t2m_coupling ** 2) * stacked("T2M"))
    d2m = 282.0 + 4.0 * (cfg.d2m_coupling * latent + np.sqrt(1 - cfg.d2m_coupling ** 2) * stacked("D2M"))
    # soil moisture: slow response to yesterday's rain
    sm = np.empty((T, H, W))
    wet_input = np.log1p(np.concatenate([np.zeros((1, H, W)), truth[:-1]]))
    sm_noise = stacked("SM")
    sm[0] = 0.3
    for t in range(1, T):
        sm[t] = cfg.sm_memory * sm[t - 1] + (1 - cfg.sm_memory) * (0.2 + 0.1 * wet_input[t]) + 0.005 * sm_noise[t]
    for name, arr in zip(PREDICTORS, (sp, t2m, d2m, sm)):
        cat.add(name, gf(arr, name), "predictor")
    if cfg.noise_channel:
        cat.add("NOISE", gf(stacked("NOISE"), "NOISE"), "predictor")
    return cat


def heavy_threshold(truth: GridField, q: float = 95.0) -> float:
    """Percentile of valid truth values standing in for the 25 mm/day tier."""
    v = truth.data[:, truth.mask, 0]
    return float(np.percentile(v, q))


def describe(catalog: FieldCatalog, label: str = "truth", event_threshold: float = 0.1) -> dict:
    """Event statistics, per-product R/RMSE against truth, and predictor
    couplings, all computed with :mod:`gridfuse.evalkit`."""
    truth = catalog[label]
    tv = truth.data[:, truth.mask, 0]
    rep = {
        "wet_fraction": float(np.mean(tv > 0)),
        "event_rate": float(np.mean(tv >= event_threshold)),
        "heavy_threshold_p95": heavy_threshold(truth),
        "products": {},
        "predictors": {},
    }
    for name in catalog.names():
        if name == label:
            continue
        f = catalog[name]
        role = catalog.role(name)
        r_map = evalkit.skill_map(f, truth, "r")
        row = {"r": r_map.average, "r_pooled": evalkit.pooled_score(f, truth, "r")}
        if role == "msp":
            row["rmse"] = evalkit.skill_map(f, truth, "rmse").average
            rep["products"][name] = row
        else:
            rep["predictors"][name] = row
    return rep
