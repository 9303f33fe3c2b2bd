"""Feature-map containers and the spatial operations that align 2D and 3D features."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


class Modality(enum.IntEnum):
    TWO_D = 0
    THREE_D = 1


class FeatureFormatError(ValueError):
    """Raised for malformed feature maps or feature files."""


@dataclass(eq=False)
class FeatureMap:
    """Dense H x W x D feature grid plus a per-pixel validity mask.

    ``source_validity`` is the mask from before densification. It is what the
    anomaly pipeline uses to zero out pixels that never carried real 3D data.
    """

    data: np.ndarray
    modality: Modality = Modality.TWO_D
    validity: np.ndarray | None = None
    source_validity: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise FeatureFormatError(f"feature data must be H x W x D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise FeatureFormatError(f"empty feature map {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(self.data).all():
            raise FeatureFormatError("feature map contains non-finite values")
        self.modality = Modality(self.modality)
        if self.validity is None:
            self.validity = np.ones(self.data.shape[:2], dtype=bool)
        self.validity = np.ascontiguousarray(self.validity, dtype=bool)
        if self.validity.shape != self.data.shape[:2]:
            raise FeatureFormatError(
                f"validity shape {self.validity.shape} != spatial shape {self.data.shape[:2]}"
            )
        if self.modality is Modality.TWO_D and not self.validity.all():
            raise FeatureFormatError("2D feature maps must be valid everywhere")
        if self.source_validity is not None:
            self.source_validity = np.ascontiguousarray(self.source_validity, dtype=bool)
            if self.source_validity.shape != self.validity.shape:
                raise FeatureFormatError("source_validity shape mismatch")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def original_validity(self) -> np.ndarray:
        return self.validity if self.source_validity is None else self.source_validity

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
            and np.array_equal(self.validity, other.validity)
        )


@dataclass(eq=False)
class PointFeatureSet:
    """Per-point features with their projected (u, v) image coordinates.

    ``u`` runs along the image width (column), ``v`` along the height (row).
    """

    features: np.ndarray
    pixel_coords: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pixel_coords = np.asarray(self.pixel_coords, dtype=np.float64)
        if self.features.ndim != 2 or self.pixel_coords.shape != (len(self.features), 2):
            raise FeatureFormatError("features must be N x D and pixel_coords N x 2")
        if len(self.features) == 0:
            raise FeatureFormatError("point set is empty")
        if not (np.isfinite(self.features).all() and np.isfinite(self.pixel_coords).all()):
            raise FeatureFormatError("point set contains non-finite values")

    def __len__(self):
        return len(self.features)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: output i samples input coordinate i * (n_in - 1) / (n_out - 1)
    mat = np.zeros((n_out, n_in))
    if n_out == 1:
        mat[0, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def upsample_bilinear(fmap: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Bilinearly resize a fully valid map to a larger grid (align-corners)."""
    h, w = fmap.height, fmap.width
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} is smaller than source {h}x{w}")
    if not fmap.validity.all():
        raise ValueError("upsample_bilinear expects a fully valid map")
    if (target_h, target_w) == (h, w):
        return FeatureMap(fmap.data.copy(), fmap.modality)
    rows = _interp_matrix(h, target_h)
    cols = _interp_matrix(w, target_w)
    out = np.einsum("ih,hwd,jw->ijd", rows, fmap.data.astype(np.float64), cols)
    # clip away float rounding so values never leave the per-channel input range
    lo = fmap.data.min(axis=(0, 1))
    hi = fmap.data.max(axis=(0, 1))
    out = np.clip(out.astype(np.float32), lo, hi)
    return FeatureMap(out, fmap.modality)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def scatter_project(points: PointFeatureSet, height: int, width: int) -> tuple[FeatureMap, int]:
    """Splat point features onto an H x W grid.

    Each point lands on pixel ``(round(v), round(u))``; collisions are averaged
    and untouched pixels stay invalid. Returns the map and the number of points
    that fell outside the grid.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be positive")
    cols = _round_half_up(points.pixel_coords[:, 0])
    rows = _round_half_up(points.pixel_coords[:, 1])
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    dropped = int((~inside).sum())
    if dropped:
        logger.info("scatter_project dropped %d of %d points outside the grid", dropped, len(points))

    n_feat = points.features.shape[1]
    flat = rows[inside] * width + cols[inside]
    sums = np.zeros((height * width, n_feat))
    np.add.at(sums, flat, points.features[inside])
    counts = np.bincount(flat, minlength=height * width)
    valid = counts > 0
    sums[valid] /= counts[valid, None]
    data = sums.reshape(height, width, n_feat).astype(np.float32)
    fmap = FeatureMap(data, Modality.THREE_D, valid.reshape(height, width))
    return fmap, dropped


def densify(fmap: FeatureMap) -> FeatureMap:
    """Fill invalid pixels from their nearest valid pixel.

    Distance is Euclidean in pixel units; among equidistant candidates the one
    earliest in row-major order wins. The incoming validity is kept as
    ``source_validity`` so later masking can still find the holes.
    """
    valid = fmap.validity
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cannot densify a map with no valid pixels")
    source = fmap.original_validity.copy()
    if n_valid == valid.size:
        return FeatureMap(fmap.data.copy(), fmap.modality, valid.copy(), source)

    valid_rc = np.argwhere(valid)  # row-major order
    hole_rc = np.argwhere(~valid)
    tree = cKDTree(valid_rc)
    dist, _ = tree.query(hole_rc, k=1)
    # exact lattice distances, so a tiny slack catches every tie
    candidates = tree.query_ball_point(hole_rc, r=dist + 1e-9)
    nearest = np.fromiter((min(c) for c in candidates), dtype=np.int64, count=len(hole_rc))

    data = fmap.data.copy()
    src = valid_rc[nearest]
    data[hole_rc[:, 0], hole_rc[:, 1]] = fmap.data[src[:, 0], src[:, 1]]
    return FeatureMap(data, fmap.modality, np.ones_like(valid), source)
