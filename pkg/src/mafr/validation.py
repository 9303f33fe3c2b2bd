"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .features import FeatureMap, Modality
from .training import prepare_pair


def as_feature_map(x, modality: Modality) -> FeatureMap:
    if isinstance(x, FeatureMap):
        if x.modality is not modality:
            raise ValueError(f"expected a {modality.name} map, got {x.modality.name}")
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"feature maps are H x W x D arrays, got shape {arr.shape}")
    return FeatureMap(arr, modality)


def check_pairs(X, n_features_2d: int | None = None, n_features_3d: int | None = None):
    """Validate a sequence of (2D, 3D) feature pairs.

    Arrays are wrapped as FeatureMaps, sparse 3D maps are densified, and
    channel counts must agree across samples (and with the fitted model
    when counts are given). Returns a list of prepared pairs.
    """
    if isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], (tuple, list)):
        raise ValueError("X must be a sequence of (2D, 3D) pairs, not a single pair")
    pairs = []
    for i, item in enumerate(X):
        try:
            e2d, e3d = item
        except (TypeError, ValueError) as exc:
            raise ValueError(f"sample {i} is not a (2D, 3D) pair") from exc
        e2d = as_feature_map(e2d, Modality.TWO_D)
        e3d = as_feature_map(e3d, Modality.THREE_D)
        pairs.append(prepare_pair(e2d, e3d))
    if not pairs:
        raise ValueError("empty dataset")
    d2 = {p[0].channels for p in pairs}
    d3 = {p[1].channels for p in pairs}
    if len(d2) > 1 or len(d3) > 1:
        raise ValueError("channel counts differ across samples")
    if n_features_2d is not None and d2 != {n_features_2d}:
        raise ValueError(f"expected {n_features_2d} 2D channels, got {d2.pop()}")
    if n_features_3d is not None and d3 != {n_features_3d}:
        raise ValueError(f"expected {n_features_3d} 3D channels, got {d3.pop()}")
    return pairs
