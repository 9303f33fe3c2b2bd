"""Desk-scale stand-in for backbone features.

Both modalities are rendered from one shared set of smooth spatial patterns
through fixed random channel mixes, so normal 2D and 3D features are
correlated the way a fusion encoder expects. Anomalies add a constant
offset in a random channel direction over one connected region of both maps.

Optional clutter adds the same kind of offset to small regions of ONE
modality only, in normal and anomalous samples alike. It models normal
modality-specific nuisances (texture marks, depth artefacts) that a
single-modality detector confuses with defects.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .features import FeatureMap, Modality

_MIX_STREAM = 0x4D49_5845  # sub-seed role constant for the channel mixes


class AnomalyShape(str, enum.Enum):
    BLOB = "Blob"
    RECT = "Rect"


@dataclass
class AnomalySpec:
    shape: AnomalyShape = AnomalyShape.BLOB
    area_fraction: float = 0.05
    magnitude: float = 3.0
    # 2D share of the perturbation energy is drawn from 0.5 +- balance_jitter
    balance_jitter: float = 0.4

    def __post_init__(self):
        self.shape = AnomalyShape(self.shape)
        if not 0.0 <= self.balance_jitter < 0.5:
            raise ValueError("balance_jitter must lie in [0, 0.5)")
        if not 0.0 < self.area_fraction < 0.5:
            raise ValueError("area_fraction must lie in (0, 0.5)")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")


@dataclass
class SyntheticSpec:
    height: int = 16
    width: int = 16
    d_2d: int = 24
    d_3d: int = 36
    structure_rank: int = 4
    noise_sigma: float = 0.1
    anomaly: AnomalySpec = field(default_factory=AnomalySpec)
    seed: int = 0
    pattern_smoothness: float = 2.0
    clutter_rate: float = 0.5
    clutter_area: int = 8
    clutter_magnitude: float = 2.5

    def __post_init__(self):
        if isinstance(self.anomaly, dict):
            self.anomaly = AnomalySpec(**self.anomaly)
        for name in ("height", "width", "d_2d", "d_3d", "structure_rank"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.clutter_rate < 0 or self.clutter_magnitude < 0 or self.clutter_area < 1:
            raise ValueError("clutter settings must be nonnegative with a positive area")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly"]["shape"] = self.anomaly.shape.value
        return d


def _channel_mixes(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, _MIX_STREAM])
    r = spec.structure_rank
    mix_2d = rng.standard_normal((r, spec.d_2d)) / np.sqrt(r)
    mix_3d = rng.standard_normal((r, spec.d_3d)) / np.sqrt(r)
    return mix_2d, mix_3d


def _sample_rng(spec: SyntheticSpec, sample_seed: int, stream: int = 0):
    return np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, sample_seed & 0xFFFFFFFFFFFFFFFF, stream])


def _render(spec: SyntheticSpec, sample_seed: int):
    rng = _sample_rng(spec, sample_seed)
    mix_2d, mix_3d = _channel_mixes(spec)
    h, w, r = spec.height, spec.width, spec.structure_rank
    patterns = rng.standard_normal((r, h, w))
    if spec.pattern_smoothness > 0:
        for k in range(r):
            patterns[k] = gaussian_filter(patterns[k], spec.pattern_smoothness, mode="wrap")
    patterns -= patterns.mean(axis=(1, 2), keepdims=True)
    std = patterns.std(axis=(1, 2), keepdims=True)
    patterns /= np.where(std > 0, std, 1.0)
    # r x H x W -> H x W x r
    basis = patterns.transpose(1, 2, 0)
    e2d = basis @ mix_2d + spec.noise_sigma * rng.standard_normal((h, w, spec.d_2d))
    e3d = basis @ mix_3d + spec.noise_sigma * rng.standard_normal((h, w, spec.d_3d))
    if spec.clutter_rate > 0 and spec.clutter_magnitude > 0:
        area = min(spec.clutter_area, h * w)
        for fmap in (e2d, e3d):
            for _ in range(int(rng.poisson(spec.clutter_rate))):
                spot = _grow_blob(h, w, area, rng)
                fmap[spot] += spec.clutter_magnitude * _unit(rng, fmap.shape[2])
    return e2d, e3d


def synth_normal_sample(spec: SyntheticSpec, sample_seed: int) -> tuple[FeatureMap, FeatureMap]:
    e2d, e3d = _render(spec, sample_seed)
    return (
        FeatureMap(e2d.astype(np.float32), Modality.TWO_D),
        FeatureMap(e3d.astype(np.float32), Modality.THREE_D),
    )


def region_size(spec: SyntheticSpec) -> int:
    return max(1, int(np.floor(spec.anomaly.area_fraction * spec.height * spec.width + 0.5)))


def _grow_blob(h: int, w: int, n: int, rng) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    start = (int(rng.integers(h)), int(rng.integers(w)))
    mask[start] = True
    frontier = set()

    def push_neighbours(r, c):
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not mask[rr, cc]:
                frontier.add((rr, cc))

    push_neighbours(*start)
    for _ in range(n - 1):
        options = sorted(frontier)
        pick = options[int(rng.integers(len(options)))]
        frontier.discard(pick)
        mask[pick] = True
        push_neighbours(*pick)
    return mask


def _place_rect(h: int, w: int, n: int, rng) -> np.ndarray:
    rh = min(h, max(1, int(np.floor(np.sqrt(n) + 0.5))))
    rw = min(w, max(1, int(np.floor(n / rh + 0.5))))
    top = int(rng.integers(h - rh + 1))
    left = int(rng.integers(w - rw + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[top : top + rh, left : left + rw] = True
    return mask


def _unit(rng, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def synth_anomalous_sample(spec: SyntheticSpec, sample_seed: int):
    """Normal sample with one perturbed region; returns (2D map, 3D map, mask)."""
    e2d, e3d = _render(spec, sample_seed)
    rng = _sample_rng(spec, sample_seed, stream=1)
    n = region_size(spec)
    if spec.anomaly.shape is AnomalyShape.BLOB:
        mask = _grow_blob(spec.height, spec.width, n, rng)
    else:
        mask = _place_rect(spec.height, spec.width, n, rng)
    mag = spec.anomaly.magnitude
    dir_2d = _unit(rng, spec.d_2d)
    dir_3d = _unit(rng, spec.d_3d)
    share = 0.5
    if spec.anomaly.balance_jitter > 0:
        share += rng.uniform(-spec.anomaly.balance_jitter, spec.anomaly.balance_jitter)
    e2d[mask] += mag * np.sqrt(2 * share) * dir_2d
    e3d[mask] += mag * np.sqrt(2 * (1 - share)) * dir_3d
    return (
        FeatureMap(e2d.astype(np.float32), Modality.TWO_D),
        FeatureMap(e3d.astype(np.float32), Modality.THREE_D),
        mask,
    )


# Sample-seed bases keep train and test draws disjoint.
TRAIN_BASE = 0
TEST_NORMAL_BASE = 1_000_000
TEST_ANOMALOUS_BASE = 2_000_000


@dataclass
class SyntheticSuite:
    train: list  # [(id, e2d, e3d)]
    test: list  # [(id, e2d, e3d, label, mask)]


def build_suite(spec: SyntheticSpec, n_train: int = 20, n_test: int = 20) -> SyntheticSuite:
    """``n_train`` normal training pairs, ``n_test`` normal + ``n_test`` anomalous test pairs."""
    if n_train < 1 or n_test < 1:
        raise ValueError("empty dataset")
    train = [(f"train_{i:04d}", *synth_normal_sample(spec, TRAIN_BASE + i)) for i in range(n_train)]
    test = []
    for i in range(n_test):
        e2d, e3d = synth_normal_sample(spec, TEST_NORMAL_BASE + i)
        test.append((f"test_normal_{i:04d}", e2d, e3d, 0, np.zeros((spec.height, spec.width), dtype=bool)))
    for i in range(n_test):
        e2d, e3d, mask = synth_anomalous_sample(spec, TEST_ANOMALOUS_BASE + i)
        test.append((f"test_anomalous_{i:04d}", e2d, e3d, 1, mask))
    return SyntheticSuite(train, test)
