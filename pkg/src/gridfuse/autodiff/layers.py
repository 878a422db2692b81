"""Network primitives built on :mod:`gridfuse.autodiff.tensor`.

Image tensors are channels-last, ``[N, H, W, C]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    make,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    split,
    tanh,
    transpose,
)

BCE_FLOOR = 1e-7


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``x``: ``[N, H, W, Cin]``; ``kernels``: ``[k, k, Cin, Cout]`` with odd k.
    """
    x = as_tensor(x)
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"conv2d expects [N,H,W,{cin}] input, got {x.shape}")
    N, H, W, _ = x.shape
    p = k // 2
    xd = x.data
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    # [N, H, W, Cin, k, k] -> [N*H*W, k*k*Cin] in (di, dj, c) order
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(N * H * W, k * k * cin)
    wmat = kernels.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(N, H, W, cout)

    def bw(g):
        g = np.asarray(g, dtype=out.dtype)
        g2 = g.reshape(N * H * W, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient is a same-padded correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (p, p), (p, p), (0, 0))) if p else g
            gcols = sliding_window_view(gp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
            kflip = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (gcols.reshape(N * H * W, k * k * cout) @ kflip).reshape(N, H, W, cin)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return make(out, parents, bw, "conv2d")


def maxpool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 stride-2 max pool; returns the output and the in-window argmax.

    Ties go to the first maximal position in row-major window order.
    """
    N, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    win = x.data.reshape(N, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, H // 2, W // 2, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(N, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(N, H, W, C)
        return (gx,)

    return make(out, (x,), bw, "maxpool2"), arg


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    N, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(N, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return make(out, (x,), bw, "upsample2")


# ---------------------------------------------------------------- dense / norm


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b``."""
    x = as_tensor(x)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {weights.shape[0]}")
    if x.ndim == 2:
        y = matmul(x, weights)
    else:
        lead = x.shape[:-1]
        y = reshape(matmul(reshape(x, (-1, x.shape[-1])), weights), (*lead, weights.shape[1]))
    return y if bias is None else add(y, bias)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- attention


def positional_encoding(L: int, D: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal positions, ``[L, D]``."""
    pos = np.arange(L)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def multihead_attention(x: Tensor, heads: int, wq, bq, wk, bk, wv, bv, wo, bo) -> Tensor:
    """Scaled dot-product self-attention over ``[N, L, D]`` tokens."""
    N, L, D = x.shape
    if heads < 1 or D % heads:
        raise ConfigError(f"model width {D} is not divisible by {heads} heads")
    dh = D // heads

    def split_heads(t):
        return transpose(reshape(t, (N, L, heads, dh)), (0, 2, 1, 3))

    q = split_heads(dense(x, wq, bq))
    k = split_heads(dense(x, wk, bk))
    v = split_heads(dense(x, wv, bv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    return dense(reshape(ctx, (N, L, D)), wo, bo)


def encoder_block(x: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    """Post-norm Transformer encoder block: attention and feed-forward
    sublayers, each followed by residual add and layer norm."""
    a = multihead_attention(
        x, heads,
        p[prefix + "wq"], p[prefix + "bq"], p[prefix + "wk"], p[prefix + "bk"],
        p[prefix + "wv"], p[prefix + "bv"], p[prefix + "wo"], p[prefix + "bo"],
    )
    x = layer_norm(x + a, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    f = dense(relu(dense(x, p[prefix + "ff1_w"], p[prefix + "ff1_b"])), p[prefix + "ff2_w"], p[prefix + "ff2_b"])
    return layer_norm(x + f, p[prefix + "ln2_g"], p[prefix + "ln2_b"])


# ---------------------------------------------------------------- recurrent


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate blocks in ``w``/``u``/``b`` are ordered i, f, g, o."""
    z = add(add(matmul(x, w), matmul(h, u)), b)
    i, f, g, o = split(z, 4, axis=-1)
    c_new = sigmoid(f) * c + sigmoid(i) * tanh(g)
    h_new = sigmoid(o) * tanh(c_new)
    return h_new, c_new


def lstm_sequence(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Run the cell over ``[N, steps, D]`` from zero state; returns the final hidden state."""
    N, steps, _ = x.shape
    hidden = u.shape[0]
    h = Tensor(np.zeros((N, hidden), dtype=w.dtype))
    c = Tensor(np.zeros((N, hidden), dtype=w.dtype))
    for t in range(steps):
        h, c = lstm_cell(x[:, t, :], h, c, w, u, b)
    return h


# ---------------------------------------------------------------- losses


def _valid(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    return m


def bce(p: Tensor, y, mask=None) -> Tensor:
    """Mean binary cross-entropy over valid entries.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` before the logs; the gradient is
    evaluated at the clamped value rather than zeroed, so saturated wrong
    predictions keep learning.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"bce shapes differ: {p.shape} vs {y.shape}")
    valid = _valid(mask, p.shape)
    n = int(valid.sum())
    if n == 0:
        raise ShapeError("bce over zero valid entries")
    pc = np.clip(p.data, BCE_FLOOR, 1 - BCE_FLOOR)
    ys = np.where(valid, y, 0.0)
    terms = np.where(valid, ys * np.log(pc) + (1 - ys) * np.log(1 - pc), 0.0)
    loss = np.asarray(-terms.sum() / n, dtype=p.dtype)

    def bw(g):
        return (g * np.where(valid, -(ys / pc - (1 - ys) / (1 - pc)), 0.0) / n,)

    return make(loss, (p,), bw, "bce")


def mse(pred: Tensor, y, mask=None) -> Tensor:
    """Mean squared error over valid entries."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {y.shape}")
    valid = _valid(mask, pred.shape)
    n = int(valid.sum())
    if n == 0:
        raise ShapeError("mse over zero valid entries")
    diff = np.where(valid, pred.data - np.where(valid, y, 0.0), 0.0)
    loss = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return make(loss, (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


__all__ = [
    "bce", "conv2d", "dense", "encoder_block", "layer_norm", "lstm_cell", "lstm_sequence",
    "maxpool2", "mse", "multihead_attention", "positional_encoding", "upsample2", "concat",
]
