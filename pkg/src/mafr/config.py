"""Run configuration: one JSON document, strict keys, every field defaulted.

Layout::

    {"seed": 0, "threads": null,
     "synthetic": {...SyntheticSpec fields except seed..., "n_train": 20, "n_test": 20},
     "model": {...ModelConfig fields; null dims are taken from the data...},
     "train": {"epochs": 100, ..., "shot_count": null, "checkpoint_every": 0},
     "loss": {...LossWeights fields...},
     "inference": {"strategy": "multiply", "sigma": 4.0, "mask_first": true, "limits": [0.3, 0.01]},
     "paths": {...}}

All randomness derives from ``seed``: the synthetic generator uses
``seed ^ SEED_SYNTH``, training derives its own streams from ``seed``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .anomaly import FusionStrategy
from .losses import LossWeights
from .network import ModelConfig
from .synthetic import AnomalySpec, SyntheticSpec
from .training import SEED_SYNTH, TrainConfig, sub_seed


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


@dataclass
class SynthSection:
    height: int = 16
    width: int = 16
    d_2d: int = 24
    d_3d: int = 36
    structure_rank: int = 4
    noise_sigma: float = 0.1
    anomaly: dict = field(default_factory=lambda: {"shape": "Blob", "area_fraction": 0.05,
                                                   "magnitude": 3.0, "balance_jitter": 0.4})
    pattern_smoothness: float = 2.0
    clutter_rate: float = 0.5
    clutter_area: int = 8
    clutter_magnitude: float = 2.5
    n_train: int = 20
    n_test: int = 20


@dataclass
class ModelSection:
    d_2d: int | None = None
    d_3d: int | None = None
    fused_dim: int | None = None
    encoder_widths: list | None = None
    decoder_2d_widths: list | None = None
    decoder_3d_widths: list | None = None
    dropout: float = 0.1
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    use_skip: bool = True
    use_cbam: bool = True


@dataclass
class TrainSection:
    epochs: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    shot_count: int | None = None
    checkpoint_every: int = 0  # 0 = final checkpoint only


@dataclass
class LossSection:
    lambda_sim: float = 1.0
    lambda_smooth: float = 1.0
    lambda_census: float = 1.0
    epsilon: float = 1e-8
    census_kernel: int = 3


@dataclass
class InferenceSection:
    strategy: str = "multiply"
    sigma: float = 4.0
    mask_first: bool = True
    limits: list = field(default_factory=lambda: [0.3, 0.01])


@dataclass
class PathSection:
    data_dir: str = "data"
    train_manifest: str = "data/train.json"
    test_manifest: str = "data/test.json"
    run_dir: str = "run"
    checkpoint: str = "run/checkpoint"
    maps_dir: str = "run/maps"
    report_dir: str = "run/report"
    ablation_dir: str = "run/ablation"
    gradcheck_dir: str = "run/gradcheck"


@dataclass
class GradcheckSection:
    trials: int = 100
    full_trials: int = 3
    d_2d: int = 6
    d_3d: int = 9
    fused_dim: int = 8
    size: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    synthetic: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    paths: PathSection = field(default_factory=PathSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    # ---- conversions to module types -----------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        s = asdict(self.synthetic)
        s.pop("n_train")
        s.pop("n_test")
        s["anomaly"] = AnomalySpec(**s["anomaly"])
        return SyntheticSpec(seed=sub_seed(self.seed, SEED_SYNTH), **s)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**asdict(self.loss))

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        t.pop("checkpoint_every")
        return TrainConfig(weights=self.loss_weights(), seed=self.seed, **t)

    def model_config(self, d_2d: int | None = None, d_3d: int | None = None) -> ModelConfig:
        m = asdict(self.model)
        m["d_2d"] = m["d_2d"] or d_2d
        m["d_3d"] = m["d_3d"] or d_3d
        if m["d_2d"] is None or m["d_3d"] is None:
            raise ConfigError("model dims unknown: set model.d_2d / model.d_3d or provide data")
        return ModelConfig(**m)

    def strategy(self) -> FusionStrategy:
        return FusionStrategy.parse(self.inference.strategy)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        try:
            self.synthetic_spec()
            self.train_config()
            self.strategy()
            if self.model.d_2d is not None and self.model.d_3d is not None:
                self.model_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.synthetic.n_train < 1 or self.synthetic.n_test < 1:
            raise ConfigError("empty dataset")
        if self.inference.sigma <= 0:
            raise ConfigError("inference.sigma must be positive")
        if not self.inference.limits or any(not 0 < x <= 1 for x in self.inference.limits):
            raise ConfigError("inference.limits must lie in (0, 1]")
        if self.train.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be nonnegative")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")
        g = self.gradcheck
        if min(g.trials, g.d_2d, g.d_3d, g.fused_dim, g.size) < 1 or g.full_trials < 0:
            raise ConfigError("gradcheck settings must be positive")
        return self


def _merge(section, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(section)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    for key, value in doc.items():
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{where}{key}.")
        elif key == "anomaly":
            extra = sorted(set(value) - set(current)) if isinstance(value, dict) else None
            if extra is None or extra:
                raise ConfigError(f"unknown config key(s) in {where}anomaly: {extra}")
            current.update(value)
        else:
            setattr(section, key, value)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, doc, "")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Dotted-key overrides (``train.epochs``), applied after the file."""
    for dotted, value in overrides.items():
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = getattr(node, p, None)
            if not dataclasses.is_dataclass(node):
                raise ConfigError(f"unknown config key {dotted}")
        if not hasattr(node, leaf) or dataclasses.is_dataclass(getattr(node, leaf)):
            raise ConfigError(f"unknown config key {dotted}")
        setattr(node, leaf, value)
    return cfg.validate()
