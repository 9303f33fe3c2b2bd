"""Threshold-free detection and localisation metrics."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.stats import rankdata

# 4-connectivity in 2-D
_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(anomalous score > normal score), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both normal and anomalous labels")
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pro_curve(score_maps, gt_masks):
    """Per-region-overlap vs FPR over all distinct score thresholds.

    Returns ``(fpr, pro)`` starting at (0, 0); thresholds are swept from the
    highest score down, each tie group as a single step.
    """
    maps = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in score_maps]
    masks = [np.asarray(g, dtype=bool) for g in gt_masks]
    if len(maps) != len(masks):
        raise ValueError("need one ground-truth mask per score map")
    scores, region_ids, sizes = [], [], []
    next_id = 1
    for smap, gt in zip(maps, masks):
        if smap.shape != gt.shape:
            raise ValueError(f"score map {smap.shape} and mask {gt.shape} differ")
        labelled, n = cc_label(gt, structure=_FOUR_CONN)
        ids = np.where(labelled > 0, labelled + next_id - 1, 0)
        sizes.extend(np.bincount(labelled.ravel(), minlength=n + 1)[1:])
        next_id += n
        scores.append(smap.ravel())
        region_ids.append(ids.ravel())
    n_regions = next_id - 1
    if n_regions == 0:
        raise ValueError("AUPRO needs at least one ground-truth region")
    scores = np.concatenate(scores)
    region_ids = np.concatenate(region_ids)
    sizes = np.asarray(sizes, dtype=np.float64)
    n_neg = int((region_ids == 0).sum())
    if n_neg == 0:
        raise ValueError("AUPRO needs anomaly-free pixels to measure FPR")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    r_sorted = region_ids[order]
    # per-pixel increments: FPR for negatives, 1/(n_regions*|region|) of PRO for region pixels
    pro_inc = np.where(r_sorted > 0, 1.0 / (n_regions * sizes[np.maximum(r_sorted, 1) - 1]), 0.0)
    fpr_cum = np.cumsum(r_sorted == 0) / n_neg  # counts first, so the last step is exactly 1
    pro_cum = np.cumsum(pro_inc)
    # keep the last index of each tie group
    group_end = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    fpr = np.r_[0.0, fpr_cum[group_end]]
    pro = np.r_[0.0, pro_cum[group_end]]
    return np.clip(fpr, 0.0, 1.0), np.clip(pro, 0.0, 1.0)


def area_up_to(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under a monotone-x polyline on [0, limit]."""
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit:
        nxt = np.searchsorted(x, limit, side="right")
        if nxt < len(x):
            x0, x1, y0, y1 = x[nxt - 1], x[nxt], y[nxt - 1], y[nxt]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        else:
            y_lim = ys[-1]
        xs = np.r_[xs, limit]
        ys = np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(score_maps, gt_masks, fpr_limit: float = 0.3) -> float:
    """Area under the PRO curve up to ``fpr_limit``, divided by the limit."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(score_maps, gt_masks)
    return float(np.clip(area_up_to(fpr, pro, fpr_limit) / fpr_limit, 0.0, 1.0))
