"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t``.

    Returns ``(flat_indices, estimates)``; with ``max_entries`` a random
    subset of entries is probed.
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    est = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        est[n] = (fp - fm) / (2 * h)
    return idx, est


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)``; the floor keeps tiny gradients
    from being judged on relative noise alone."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if len(analytic) else 0.0


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Compare ``backward`` against finite differences for every tensor in
    ``params``; returns the worst relative error."""
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        idx, est = numeric_grad(f, p, h=h, max_entries=max_entries, rng=rng)
        g = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        worst = max(worst, max_rel_error(g[idx], est, floor))
    return worst
