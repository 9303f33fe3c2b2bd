"""Run-level evaluation, report formatting and the loss / fusion ablation grid."""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network, training
from .anomaly import FusionStrategy, infer
from .features import FeatureMap
from .io import DatasetManifest, Label, load_feature_map, load_mask
from .losses import LossWeights
from .metrics import aupro, auroc

logger = logging.getLogger(__name__)

DEFAULT_LIMITS = (0.30, 0.01)
SKIPPED = "skipped"


def limit_name(limit: float) -> str:
    return f"AUPRO@{round(limit * 100, 6):g}%"


@dataclass
class EvalSample:
    id: str
    e2d: FeatureMap
    e3d: FeatureMap
    label: int
    mask: np.ndarray | None = None


@dataclass
class EvalReport:
    i_auroc: float | None
    p_auroc: float | None
    aupro: dict[float, float | None]
    scores: list[tuple[str, int, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    pixel_metrics: str = "ok"

    def columns(self) -> dict[str, float | None]:
        cols = {"I-AUROC": self.i_auroc, "P-AUROC": self.p_auroc}
        for lim, val in self.aupro.items():
            cols[limit_name(lim)] = val
        return cols

    def to_dict(self) -> dict:
        return {
            "metrics": self.columns(),
            "limits": list(self.aupro),
            "pixel_metrics": self.pixel_metrics,
            "scores": [{"id": i, "label": lab, "score": s} for i, lab, s in self.scores],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        metrics = doc["metrics"]
        limits = {float(lim): metrics[limit_name(lim)] for lim in doc["limits"]}
        return cls(
            metrics["I-AUROC"],
            metrics["P-AUROC"],
            limits,
            [(s["id"], s["label"], s["score"]) for s in doc.get("scores", [])],
            doc.get("config", {}),
            doc.get("pixel_metrics", "ok"),
        )


def evaluate_samples(
    params: network.ModelParams,
    samples: Sequence[EvalSample],
    strategy=FusionStrategy.MULTIPLY,
    sigma: float = 4.0,
    limits: Sequence[float] = DEFAULT_LIMITS,
    mask_first: bool = True,
    config: dict | None = None,
) -> EvalReport:
    scores, labels, maps, masks = [], [], [], []
    have_masks = True
    for s in samples:
        res = infer(params, s.e2d, s.e3d, strategy=strategy, sigma=sigma, mask_first=mask_first)
        scores.append((s.id, int(s.label), res.score))
        labels.append(int(s.label))
        maps.append(res.final.values)
        mask = s.mask
        if mask is None and s.label == 0:
            mask = np.zeros(res.final.shape, dtype=bool)
        if mask is None:
            have_masks = False
        masks.append(mask)
    return report_from_maps(scores, maps, masks if have_masks else None, limits, config)


def report_from_maps(scores, maps, masks, limits=DEFAULT_LIMITS, config=None) -> EvalReport:
    labels = [lab for _, lab, _ in scores]
    values = [s for _, _, s in scores]
    i_auroc = auroc(values, labels) if 0 < sum(labels) < len(labels) else None
    report = EvalReport(i_auroc, None, {float(lim): None for lim in limits}, list(scores), dict(config or {}))
    gt_pixels = masks is not None and any(np.asarray(m).any() for m in masks)
    if not gt_pixels:
        report.pixel_metrics = SKIPPED
        logger.warning("ground-truth masks unavailable; pixel metrics skipped")
        return report
    flat_scores = np.concatenate([np.asarray(m).ravel() for m in maps])
    flat_gt = np.concatenate([np.asarray(m, dtype=bool).ravel() for m in masks])
    report.p_auroc = auroc(flat_scores, flat_gt)
    for lim in limits:
        report.aupro[float(lim)] = aupro(maps, masks, lim)
    return report


def load_eval_samples(manifest: DatasetManifest) -> list[EvalSample]:
    out = []
    for s in manifest.samples:
        e2d, e3d = training.prepare_pair(
            load_feature_map(manifest.resolve(s.path_2d)), load_feature_map(manifest.resolve(s.path_3d))
        )
        mask = load_mask(manifest.resolve(s.mask_path)) if s.mask_path else None
        out.append(EvalSample(s.id, e2d, e3d, int(s.label is Label.ANOMALOUS), mask))
    return out


def evaluate_run(params, manifest: DatasetManifest, strategy=FusionStrategy.MULTIPLY, sigma=4.0,
                 limits=DEFAULT_LIMITS, mask_first=True, config=None) -> EvalReport:
    return evaluate_samples(params, load_eval_samples(manifest), strategy, sigma, limits, mask_first, config)


# ---- formatting -------------------------------------------------------------


def _fmt(v):
    return SKIPPED if v is None else f"{v:.4f}"


def format_table(rows: Sequence[tuple[str, EvalReport]], title: str | None = None) -> str:
    """Aligned plain-text table, one row per report."""
    if not rows:
        return ""
    headers = ["Row"] + list(rows[0][1].columns())
    body = [[name] + [_fmt(v) for v in rep.columns().values()] for name, rep in rows]
    widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines) + "\n"


def scores_csv(report: EvalReport) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label", "score"])
    for sid, lab, score in report.scores:
        writer.writerow([sid, lab, repr(float(score))])
    return buf.getvalue()


def write_report(report: EvalReport, out_dir, stem="report", title=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / f"{stem}.txt").write_text(format_table([(title or stem, report)]))
    (out_dir / "scores.csv").write_text(scores_csv(report))


# ---- ablation grid ---------------------------------------------------------

LOSS_ROWS = [
    ("L_sim", (1.0, 0.0, 0.0)),
    ("L_census", (0.0, 0.0, 1.0)),
    ("L_smooth", (0.0, 1.0, 0.0)),
    ("L_sim+census+smooth", (1.0, 1.0, 1.0)),
]
FUSION_ROWS = [
    ("Psi_2D", FusionStrategy.ONLY_2D),
    ("Psi_3D", FusionStrategy.ONLY_3D),
    ("Psi_2D + Psi_3D", FusionStrategy.ADD),
    ("max(Psi_2D, Psi_3D)", FusionStrategy.MAX),
    ("Psi_2D * Psi_3D", FusionStrategy.MULTIPLY),
]


def data_fingerprint(pairs) -> str:
    h = hashlib.sha256()
    for e2d, e3d in pairs:
        for fmap in (e2d, e3d):
            h.update(fmap.data.tobytes())
            h.update(fmap.original_validity.tobytes())
    return h.hexdigest()


def training_hash(model_cfg: network.ModelConfig, train_cfg: training.TrainConfig, fingerprint: str) -> str:
    doc = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": fingerprint}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AblationRow:
    group: str
    name: str
    train_hash: str
    report: EvalReport


def _train_cached(pairs, model_cfg, train_cfg, cache_dir, fingerprint):
    key = training_hash(model_cfg, train_cfg, fingerprint)
    ckpt = Path(cache_dir) / "models" / key if cache_dir else None
    if ckpt is not None and (ckpt / network.CHECKPOINT_INDEX).exists():
        logger.info("reusing cached model %s", key)
        return network.load_checkpoint(ckpt), key, True
    params, log = training.fit_pairs(pairs, model_cfg, train_cfg)
    if ckpt is not None:
        network.save_checkpoint(params, ckpt)
        (ckpt / "trainlog.json").write_text(json.dumps(log.to_dict(), indent=2, sort_keys=True) + "\n")
    return params, key, False


def _samples_fingerprint(samples) -> str:
    h = hashlib.sha256(data_fingerprint([(s.e2d, s.e3d) for s in samples]).encode())
    for s in samples:
        h.update(f"{s.id}:{s.label}".encode())
        if s.mask is not None:
            h.update(np.asarray(s.mask, dtype=bool).tobytes())
    return h.hexdigest()


def _eval_cached(params, key, samples, strategy, sigma, limits, cache_dir, mask_first, test_fp):
    strategy = FusionStrategy.parse(strategy)
    cell = hashlib.sha256(
        json.dumps([key, strategy.value, sigma, list(limits), mask_first, test_fp]).encode()
    ).hexdigest()[:16]
    path = Path(cache_dir) / "cells" / f"{cell}.json" if cache_dir else None
    if path is not None and path.exists():
        return EvalReport.from_dict(json.loads(path.read_text()))
    report = evaluate_samples(params, samples, strategy, sigma, limits, mask_first,
                              {"train_hash": key, "strategy": strategy.value, "sigma": sigma})
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def ablation_grid(
    train_pairs,
    test_samples: Sequence[EvalSample],
    model_cfg: network.ModelConfig,
    train_cfg: training.TrainConfig,
    sigma: float = 4.0,
    limits: Sequence[float] = DEFAULT_LIMITS,
    cache_dir=None,
    mask_first: bool = True,
) -> list[AblationRow]:
    """Four loss configurations (multiply fusion) plus five fusion strategies on the full-loss model."""
    fingerprint = data_fingerprint(train_pairs)
    test_fp = _samples_fingerprint(test_samples)
    base_w = train_cfg.weights
    rows: list[AblationRow] = []
    full = None
    for name, (l_sim, l_smooth, l_census) in LOSS_ROWS:
        weights = replace(base_w, lambda_sim=l_sim, lambda_smooth=l_smooth, lambda_census=l_census)
        cfg = replace(train_cfg, weights=weights)
        params, key, _ = _train_cached(train_pairs, model_cfg, cfg, cache_dir, fingerprint)
        rep = _eval_cached(params, key, test_samples, FusionStrategy.MULTIPLY, sigma, limits, cache_dir, mask_first,
                           test_fp)
        rows.append(AblationRow("loss", name, key, rep))
        if (l_sim, l_smooth, l_census) == (1.0, 1.0, 1.0):
            full = (params, key)
    params, key = full
    for name, strategy in FUSION_ROWS:
        rep = _eval_cached(params, key, test_samples, strategy, sigma, limits, cache_dir, mask_first, test_fp)
        rows.append(AblationRow("fusion", name, key, rep))
    return rows


def ablation_to_dict(rows: Sequence[AblationRow]) -> dict:
    return {
        "rows": [
            {"group": r.group, "name": r.name, "train_hash": r.train_hash, "metrics": r.report.columns()}
            for r in rows
        ]
    }


def ablation_table(rows: Sequence[AblationRow]) -> str:
    loss = [(r.name, r.report) for r in rows if r.group == "loss"]
    fusion = [(r.name, r.report) for r in rows if r.group == "fusion"]
    return format_table(loss, "Losses ablation") + "\n" + format_table(fusion, "Anomaly map combinations")


def default_loss_weights() -> LossWeights:
    return LossWeights()
