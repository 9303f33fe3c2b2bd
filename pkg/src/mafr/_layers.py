"""Layer primitives with explicit backward passes.

Activations are (P, C) arrays: P flattened pixels, C channels. Every
``*_backward`` returns gradients in the same order as the forward inputs.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import erf, expit

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def shift_matrices(n: int, k: int, dtype=np.float64) -> np.ndarray:
    """(k, n, n) selectors for a k-wide window with replicate padding.

    ``(S[a] @ x)[i] == x[clip(i + a - k // 2, 0, n - 1)]``.
    """
    r = k // 2
    idx = np.clip(np.arange(n)[None, :] + np.arange(k)[:, None] - r, 0, n - 1)
    out = np.zeros((k, n, n), dtype=dtype)
    out[np.arange(k)[:, None], np.arange(n)[None, :], idx] = 1.0
    return out


@lru_cache(maxsize=32)
def window_index(height: int, width: int, k: int):
    """Replicate-padded k x k window gather indices.

    Returns ``(rows, cols, flat)`` with ``rows[a, i] = clip(i + a - k // 2)``,
    likewise for cols, and ``flat[a, b, i, j] = rows[a, i] * width + cols[b, j]``.
    """
    r = k // 2
    rows = np.clip(np.arange(height)[None, :] + np.arange(k)[:, None] - r, 0, height - 1)
    cols = np.clip(np.arange(width)[None, :] + np.arange(k)[:, None] - r, 0, width - 1)
    flat = rows[:, None, :, None] * width + cols[None, :, None, :]
    for arr in (rows, cols, flat):
        arr.setflags(write=False)
    return rows, cols, flat


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad(z):
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


def layernorm_forward(a, gamma, beta, eps=LN_EPS):
    mu = a.mean(axis=1, keepdims=True)
    centered = a - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def layernorm_backward(dy, cache, gamma):
    xhat, inv_std = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    da = inv_std * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return da, dgamma, dbeta


def dropout_mask(rng, shape, p, dtype):
    if p <= 0.0:
        return None
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1.0 - p)


def channel_gate_forward(feat, w1, w2, gates_open=False):
    """CBAM channel attention: shared MLP over avg- and max-pooled descriptors."""
    n_pix = feat.shape[0]
    avg = feat.mean(axis=0)
    arg = feat.argmax(axis=0)
    mx = feat[arg, np.arange(feat.shape[1])]
    za = avg @ w1
    zm = mx @ w1
    ha = np.maximum(za, 0)
    hm = np.maximum(zm, 0)
    gate = expit(ha @ w2 + hm @ w2)
    if gates_open:
        gate = np.ones_like(gate)
    out = feat * gate
    cache = (feat, avg, mx, arg, za, zm, ha, hm, gate, n_pix, gates_open)
    return out, cache


def channel_gate_backward(dout, cache, w1, w2):
    feat, avg, mx, arg, za, zm, ha, hm, gate, n_pix, gates_open = cache
    dfeat = dout * gate
    if gates_open:
        return dfeat, np.zeros_like(w1), np.zeros_like(w2)
    dgate = (dout * feat).sum(axis=0)
    dlogit = dgate * gate * (1 - gate)
    dw2 = np.outer(ha, dlogit) + np.outer(hm, dlogit)
    dh = dlogit @ w2.T
    dza = dh * (za > 0)
    dzm = dh * (zm > 0)
    dw1 = np.outer(avg, dza) + np.outer(mx, dzm)
    dfeat += (dza @ w1.T) / n_pix
    np.add.at(dfeat, (arg, np.arange(feat.shape[1])), dzm @ w1.T)
    return dfeat, dw1, dw2


def spatial_gate_forward(feat, kernel, height, width, gates_open=False):
    """CBAM spatial attention: k x k conv over channel-avg and channel-max maps."""
    n_ch = feat.shape[1]
    k = kernel.shape[-1]
    arg = feat.argmax(axis=1)
    desc = np.stack([feat.mean(axis=1), feat[np.arange(feat.shape[0]), arg]])
    _, _, flat = window_index(height, width, k)
    windows = desc[:, flat]  # 2 x k x k x H x W
    logits = np.tensordot(kernel, windows, axes=3)
    gate = expit(logits).reshape(-1)
    if gates_open:
        gate = np.ones_like(gate)
    out = feat * gate[:, None]
    cache = (feat, arg, windows, gate, n_ch, height, width, gates_open)
    return out, cache


def spatial_gate_backward(dout, cache, kernel):
    feat, arg, windows, gate, n_ch, height, width, gates_open = cache
    dfeat = dout * gate[:, None]
    if gates_open:
        return dfeat, np.zeros_like(kernel)
    dgate = (dout * feat).sum(axis=1)
    dlogit = (dgate * gate * (1 - gate)).reshape(height, width)
    dkernel = np.tensordot(windows, dlogit, axes=([3, 4], [0, 1]))
    _, _, flat = window_index(height, width, kernel.shape[-1])
    n_pix = height * width
    ddesc = np.stack([
        np.bincount(flat.ravel(), weights=(kernel[c][:, :, None, None] * dlogit).ravel(), minlength=n_pix)
        for c in range(2)
    ]).astype(feat.dtype, copy=False)
    dfeat += ddesc[0][:, None] / n_ch
    dfeat[np.arange(feat.shape[0]), arg] += ddesc[1]
    return dfeat, dkernel.astype(kernel.dtype, copy=False)
