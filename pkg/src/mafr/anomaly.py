"""From reconstructions to pixel anomaly maps and sample scores."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import network
from .features import FeatureMap


class MapKind(str, enum.Enum):
    PSI_2D = "Psi2D"
    PSI_3D = "Psi3D"
    COMBINED = "Combined"
    SMOOTHED = "Smoothed"


class FusionStrategy(str, enum.Enum):
    MULTIPLY = "multiply"
    ADD = "add"
    MAX = "max"
    ONLY_2D = "2d"
    ONLY_3D = "3d"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"only2d": "2d", "only3d": "3d", "mul": "multiply", "product": "multiply", "sum": "add"}
        key = str(value).lower()
        return cls(aliases.get(key, key))


@dataclass(eq=False)
class AnomalyMap:
    values: np.ndarray
    kind: MapKind
    sample_score: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.kind = MapKind(self.kind)
        if self.values.ndim != 2:
            raise ValueError("anomaly maps are H x W")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("anomaly map values must be finite and nonnegative")
        if self.sample_score is not None and self.kind is not MapKind.SMOOTHED:
            raise ValueError("only smoothed maps carry a sample score")

    @property
    def shape(self):
        return self.values.shape


def _data(x):
    return x.data if isinstance(x, FeatureMap) else np.asarray(x)


def modality_map(e, ehat, kind=MapKind.PSI_2D) -> AnomalyMap:
    """Per-pixel L2 distance over channels."""
    e = _data(e).astype(np.float64)
    ehat = _data(ehat).astype(np.float64)
    if e.shape != ehat.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {ehat.shape}")
    return AnomalyMap(np.sqrt(((e - ehat) ** 2).sum(axis=-1)), kind)


def fuse(psi2d: AnomalyMap, psi3d: AnomalyMap, strategy=FusionStrategy.MULTIPLY) -> AnomalyMap:
    if psi2d.shape != psi3d.shape:
        raise ValueError("anomaly maps have different shapes")
    strategy = FusionStrategy.parse(strategy)
    a, b = psi2d.values, psi3d.values
    if strategy is FusionStrategy.MULTIPLY:
        out = a * b
    elif strategy is FusionStrategy.ADD:
        out = a + b
    elif strategy is FusionStrategy.MAX:
        out = np.maximum(a, b)
    elif strategy is FusionStrategy.ONLY_2D:
        out = a.copy()
    else:
        out = b.copy()
    return AnomalyMap(out, MapKind.COMBINED)


def mask_invalid(amap: AnomalyMap, source_validity) -> AnomalyMap:
    valid = np.asarray(source_validity, dtype=bool)
    if valid.shape != amap.shape:
        raise ValueError("validity mask does not match the map")
    return AnomalyMap(np.where(valid, amap.values, 0.0), amap.kind)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian with radius ceil(3 sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(amap: AnomalyMap, sigma: float = 4.0) -> AnomalyMap:
    """Separable Gaussian blur with replicate padding; sets the sample score."""
    k = gaussian_kernel(sigma)
    out = correlate1d(amap.values, k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    out = np.maximum(out, 0.0)  # clamp float round-off below zero
    return AnomalyMap(out, MapKind.SMOOTHED, float(out.max()))


def score_sample(amap: AnomalyMap) -> float:
    if amap.kind is not MapKind.SMOOTHED:
        raise ValueError("score_sample expects a smoothed map")
    return float(amap.values.max())


@dataclass
class InferenceResult:
    psi_2d: AnomalyMap
    psi_3d: AnomalyMap
    combined: AnomalyMap
    final: AnomalyMap
    stages: tuple[str, ...]

    @property
    def score(self) -> float:
        return self.final.sample_score


def maps_from_reconstruction(
    e2d, r2d, e3d, r3d, source_validity=None, strategy=FusionStrategy.MULTIPLY, sigma=4.0, mask_first=True
) -> InferenceResult:
    psi2d = modality_map(e2d, r2d, MapKind.PSI_2D)
    psi3d = modality_map(e3d, r3d, MapKind.PSI_3D)
    combined = fuse(psi2d, psi3d, strategy)
    if source_validity is None:
        source_validity = np.ones(combined.shape, dtype=bool)
    if mask_first:
        masked = mask_invalid(combined, source_validity)
        final = gaussian_smooth(masked, sigma)
        stages = ("fuse", "mask", "smooth")
    else:
        smoothed = gaussian_smooth(combined, sigma)
        final = mask_invalid(smoothed, source_validity)
        final = AnomalyMap(final.values, MapKind.SMOOTHED, float(final.values.max()))
        stages = ("fuse", "smooth", "mask")
    return InferenceResult(psi2d, psi3d, combined, final, stages)


def infer(params, e2d: FeatureMap, e3d: FeatureMap, source_validity=None, strategy=FusionStrategy.MULTIPLY,
          sigma=4.0, mask_first=True) -> InferenceResult:
    """Eval-mode reconstruction followed by the anomaly-map pipeline."""
    if source_validity is None and isinstance(e3d, FeatureMap):
        source_validity = e3d.original_validity
    r2d, r3d, _ = network.forward(params, e2d, e3d, network.EVAL)
    return maps_from_reconstruction(e2d, r2d, e3d, r3d, source_validity, strategy, sigma, mask_first)
