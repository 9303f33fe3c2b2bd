"""Adam optimisation of the fusion-restoration network on normal samples."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network
from .features import FeatureMap, densify
from .io import DatasetManifest, Split, load_feature_map
from .losses import LossBreakdown, LossWeights, loss_and_gradients

logger = logging.getLogger(__name__)

# Sub-seed roles; each stream is derived as root_seed XOR role.
SEED_INIT = 0x1A17
SEED_SHUFFLE = 0x5F1E
SEED_DROPOUT = 0xD20F
SEED_FEW_SHOT = 0xF5E7
SEED_SYNTH = 0x5E7D


def sub_seed(root: int, role: int) -> int:
    return (int(root) ^ role) & 0xFFFFFFFFFFFFFFFF


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during optimisation."""


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    shot_count: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.shot_count is not None and self.shot_count < 1:
            raise ValueError("shot_count must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: network.ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adam_step(params: network.ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state)."""
    if set(grads) != set(params.tensors):
        raise ValueError("gradient bundle does not match the parameter set")
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, expected {params.tensors[k].shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {k} at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_t, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_t[k] = (p - step).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return network.ModelParams(params.config, new_t, params.init_seed), OptimizerState(new_m, new_v, t)


def few_shot_subsample(manifest: DatasetManifest, n: int, seed: int) -> DatasetManifest:
    """Seeded uniform subset of ``n`` samples, kept in manifest order."""
    if n < 1 or n > len(manifest):
        raise ValueError(f"cannot draw {n} samples from a manifest of {len(manifest)}")
    rng = np.random.default_rng(sub_seed(seed, SEED_FEW_SHOT))
    keep = np.sort(rng.choice(len(manifest), size=n, replace=False))
    return DatasetManifest([manifest.samples[i] for i in keep], manifest.split, manifest.root)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def mean_totals(self) -> list[float]:
        return [e["total"] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config": self.config, "epochs": self.epochs}


def prepare_pair(e2d: FeatureMap, e3d: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Densify a sparse 3D map, keeping its original validity for masking."""
    if e2d.data.shape[:2] != e3d.data.shape[:2]:
        raise ValueError("2D and 3D maps are not spatially aligned")
    if not e3d.validity.all():
        e3d = densify(e3d)
    return e2d, e3d


def load_pairs(manifest: DatasetManifest) -> list[tuple[FeatureMap, FeatureMap]]:
    pairs = []
    for s in manifest.samples:
        e2d = load_feature_map(manifest.resolve(s.path_2d))
        e3d = load_feature_map(manifest.resolve(s.path_3d))
        pairs.append(prepare_pair(e2d, e3d))
    return pairs


def _breakdown_mean(items: list[LossBreakdown]) -> dict:
    keys = items[0].to_dict().keys()
    return {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}


def fit_pairs(
    pairs: Sequence[tuple[FeatureMap, FeatureMap]],
    model_config: network.ModelConfig,
    train_config: TrainConfig,
    params: network.ModelParams | None = None,
    on_epoch: Callable[[int, network.ModelParams], None] | None = None,
):
    """Train on in-memory normal pairs; returns ``(params, TrainLog)``."""
    if not pairs:
        raise ValueError("no training samples")
    cfg = train_config
    if params is None:
        params = network.init_params(model_config, sub_seed(cfg.seed, SEED_INIT))
    state = OptimizerState.zeros_like(params)
    shuffle_rng = np.random.default_rng(sub_seed(cfg.seed, SEED_SHUFFLE))
    dropout_rng = np.random.default_rng(sub_seed(cfg.seed, SEED_DROPOUT))
    log = TrainLog(seed=cfg.seed, config={"model": model_config.to_dict(), "train": cfg.to_dict()})

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(pairs))
        breakdowns = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            acc = None
            for idx in batch:
                e2d, e3d = pairs[idx]
                r2d, r3d, cache = network.forward(params, e2d, e3d, network.TRAIN, dropout_rng)
                bd, g2, g3 = loss_and_gradients(e2d, r2d, e3d, r3d, cfg.weights, e3d.original_validity)
                if not np.isfinite(bd.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch + 1}, sample index {idx}")
                breakdowns.append(bd)
                grads = network.backward(params, cache, g2, g3)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] = acc[k] + grads[k]
            if len(batch) > 1:
                acc = {k: g / len(batch) for k, g in acc.items()}
            params, state = adam_step(params, acc, state, cfg)
        entry = _breakdown_mean(breakdowns)
        entry["epoch"] = epoch + 1
        entry["wall_time"] = time.perf_counter() - started
        log.epochs.append(entry)
        logger.debug("epoch %d total %.6f", epoch + 1, entry["total"])
        if on_epoch is not None:
            on_epoch(epoch + 1, params)
    return params, log


def fit(
    manifest: DatasetManifest,
    model_config: network.ModelConfig,
    train_config: TrainConfig,
    on_epoch=None,
):
    """Train from a Train-split manifest, honouring ``shot_count`` if set."""
    if manifest.split is not Split.TRAIN:
        raise ValueError("fit expects a Train-split manifest")
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    if train_config.shot_count is not None:
        manifest = few_shot_subsample(manifest, train_config.shot_count, train_config.seed)
    return fit_pairs(load_pairs(manifest), model_config, train_config, on_epoch=on_epoch)
