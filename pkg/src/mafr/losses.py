"""Reconstruction losses and their gradients w.r.t. the reconstruction.

Maps are H x W x D. ``valid`` masks (H x W) restrict which pixels count;
by default every pixel is valid. Values are computed in float64.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._layers import shift_matrices
from .features import FeatureMap


@dataclass
class LossWeights:
    lambda_sim: float = 1.0
    lambda_smooth: float = 1.0
    lambda_census: float = 1.0
    epsilon: float = 1e-8
    census_kernel: int = 3

    def __post_init__(self):
        lams = (self.lambda_sim, self.lambda_smooth, self.lambda_census)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.census_kernel < 1 or self.census_kernel % 2 == 0:
            raise ValueError("census_kernel must be an odd positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    sim: float
    smooth: float
    census: float
    total: float
    sim_2d: float = 0.0
    sim_3d: float = 0.0
    smooth_2d: float = 0.0
    smooth_3d: float = 0.0
    census_2d: float = 0.0
    census_3d: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _arr(x) -> np.ndarray:
    if isinstance(x, FeatureMap):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _prepare(e, ehat, valid):
    e, ehat = _arr(e), _arr(ehat)
    if e.shape != ehat.shape or e.ndim != 3:
        raise ValueError(f"shape mismatch: {e.shape} vs {ehat.shape}")
    if valid is None:
        valid = np.ones(e.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != e.shape[:2]:
        raise ValueError("valid mask does not match the spatial shape")
    return e, ehat, valid


def _znssd(e, ehat, eps, valid, need_grad):
    e, ehat, valid = _prepare(e, ehat, valid)
    n = int(valid.sum())
    if n < 2:
        raise ValueError("ZNSSD needs at least two valid pixels")
    x, y = e[valid], ehat[valid]  # n x D
    n_total = n * x.shape[1]

    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.sqrt((xc * xc).mean(axis=0))
    sy = np.sqrt((yc * yc).mean(axis=0))
    zx = xc / (sx + eps)
    zy = yc / (sy + eps)
    diff = zx - zy
    value = float((diff * diff).sum() / n_total)
    if not need_grad:
        return value, None

    g = -2.0 * diff / n_total  # d value / d zy
    s = sy + eps
    dy = (g - g.mean(axis=0)) / s
    # derivative of the population std, undefined (taken as 0) for constant channels
    safe = sy > 0
    coupling = (g * yc).sum(axis=0)
    dy -= np.where(safe, coupling / (s * s * np.where(safe, sy, 1.0) * n), 0.0) * yc
    grad = np.zeros_like(ehat)
    grad[valid] = dy
    return value, grad


def znssd(e, ehat, eps=1e-8, valid=None) -> float:
    """Zero-normalised SSD with per-channel statistics over valid pixels."""
    return _znssd(e, ehat, eps, valid, False)[0]


def _smoothness(e, ehat, valid, need_grad):
    e, ehat, valid = _prepare(e, ehat, valid)
    h, w, d = e.shape
    if h * w < 2:
        raise ValueError("smoothness needs more than one pixel")
    delta = ehat - e
    n_total = h * w * d

    gx = np.zeros_like(delta)
    gx[:, :-1] = delta[:, 1:] - delta[:, :-1]
    wx = np.zeros_like(delta)
    wx[:, :-1] = np.exp(-np.abs(e[:, 1:] - e[:, :-1]))
    ok_x = np.zeros((h, w), dtype=bool)
    ok_x[:, :-1] = valid[:, 1:] & valid[:, :-1]
    wx *= ok_x[:, :, None]

    gy = np.zeros_like(delta)
    gy[:-1] = delta[1:] - delta[:-1]
    wy = np.zeros_like(delta)
    wy[:-1] = np.exp(-np.abs(e[1:] - e[:-1]))
    ok_y = np.zeros((h, w), dtype=bool)
    ok_y[:-1] = valid[1:] & valid[:-1]
    wy *= ok_y[:, :, None]

    value = float((np.abs(gx) * wx + np.abs(gy) * wy).sum() / n_total)
    if not need_grad:
        return value, None

    sx = np.sign(gx) * wx / n_total
    sy = np.sign(gy) * wy / n_total
    grad = np.zeros_like(delta)
    grad[:, 1:] += sx[:, :-1]
    grad[:, :-1] -= sx[:, :-1]
    grad[1:] += sy[:-1]
    grad[:-1] -= sy[:-1]
    return value, grad


def smoothness(e, ehat, valid=None) -> float:
    """Edge-aware smoothness of the error map ``ehat - e``."""
    return _smoothness(e, ehat, valid, False)[0]


def box_pool_matrices(h: int, w: int, k: int):
    """Row and column operators of a k x k mean filter with replicate padding."""
    return shift_matrices(h, k).sum(axis=0) / k, shift_matrices(w, k).sum(axis=0) / k


def _separable(rows, cols, x):
    # rows @ x @ cols.T applied to every channel of an H x W x D map
    h, w, d = x.shape
    tmp = (rows @ x.reshape(h, w * d)).reshape(rows.shape[0], w, d)
    return cols @ tmp


def avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    rows, cols = box_pool_matrices(x.shape[0], x.shape[1], k)
    return _separable(rows, cols, x)


def _census(e, ehat, kernel, valid, need_grad):
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("census kernel must be odd")
    e, ehat, valid = _prepare(e, ehat, valid)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("census needs at least one valid pixel")
    h, w, d = e.shape
    rows, cols = box_pool_matrices(h, w, kernel)
    # invalid pixels are excluded from the pooled windows too, so the loss
    # does not depend on the reconstruction there
    masked = (ehat - e) * valid[:, :, None]
    diff = _separable(rows, cols, masked)
    n_total = n * d
    value = float(np.abs(diff[valid]).sum() / n_total)
    if not need_grad:
        return value, None
    g = np.sign(diff) * valid[:, :, None] / n_total
    grad = _separable(rows.T, cols.T, g) * valid[:, :, None]
    return value, grad


def census(e, ehat, kernel=3, valid=None) -> float:
    """Mean absolute difference of k x k average-pooled maps.

    Pooling is linear, so this is the pooled error map; invalid pixels
    contribute a zero error inside every window.
    """
    return _census(e, ehat, kernel, valid, False)[0]


def _all_terms(e2d, r2d, e3d, r3d, weights, valid3d, need_grad):
    weights = weights or LossWeights()
    terms = {}
    grads = {"2d": 0.0, "3d": 0.0}
    lam = {"sim": weights.lambda_sim, "smooth": weights.lambda_smooth, "census": weights.lambda_census}
    for tag, e, r, valid in (("2d", e2d, r2d, None), ("3d", e3d, r3d, valid3d)):
        for name, fn in (
            ("sim", lambda e, r, v, g: _znssd(e, r, weights.epsilon, v, g)),
            ("smooth", _smoothness),
            ("census", lambda e, r, v, g: _census(e, r, weights.census_kernel, v, g)),
        ):
            # zero-weighted terms still report a value but skip gradient work
            val, grad = fn(e, r, valid, need_grad and lam[name] > 0)
            terms[f"{name}_{tag}"] = val
            if grad is not None:
                grads[tag] = grads[tag] + lam[name] * grad
    sim = terms["sim_2d"] + terms["sim_3d"]
    smooth = terms["smooth_2d"] + terms["smooth_3d"]
    cen = terms["census_2d"] + terms["census_3d"]
    total = lam["sim"] * sim + lam["smooth"] * smooth + lam["census"] * cen
    return LossBreakdown(sim, smooth, cen, total, **terms), grads


def total_loss(e2d, r2d, e3d, r3d, weights: LossWeights | None = None, valid3d=None) -> LossBreakdown:
    return _all_terms(e2d, r2d, e3d, r3d, weights, valid3d, False)[0]


def loss_and_gradients(e2d, r2d, e3d, r3d, weights: LossWeights | None = None, valid3d=None):
    """Breakdown plus ``(d total / d r2d, d total / d r3d)``.

    Invalid 3D pixels receive exactly zero gradient.
    """
    bd, grads = _all_terms(e2d, r2d, e3d, r3d, weights, valid3d, True)
    g2 = grads["2d"] if not np.isscalar(grads["2d"]) else np.zeros(_arr(r2d).shape)
    g3 = grads["3d"] if not np.isscalar(grads["3d"]) else np.zeros(_arr(r3d).shape)
    return bd, g2, g3


def loss_gradients(e2d, r2d, e3d, r3d, weights: LossWeights | None = None, valid3d=None):
    _, g2, g3 = loss_and_gradients(e2d, r2d, e3d, r3d, weights, valid3d)
    return g2, g3
