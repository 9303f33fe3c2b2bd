"""Command-line entry point: ``mafr <synth|train|infer|eval|ablate|gradcheck>``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import gradcheck, network, synthetic, training
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .features import FeatureFormatError, FeatureMap
from .io import (
    DatasetManifest,
    Label,
    Sample,
    Split,
    load_manifest,
    save_feature_map,
    save_manifest,
    save_mask,
)

logger = logging.getLogger("mafr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "MAFR_THREADS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---- shared helpers ---------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve(ctx, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else ctx.workdir / p


def _load_manifest(path: Path) -> DatasetManifest:
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"invalid manifest {path}: {exc}") from exc


def _load_checkpoint(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return network.load_checkpoint(path)


def _manifest_dims(manifest: DatasetManifest) -> tuple[int, int]:
    samples = ev.load_eval_samples(DatasetManifest(manifest.samples[:1], Split.TEST, manifest.root))
    return samples[0].e2d.channels, samples[0].e3d.channels


class Context:
    def __init__(self, cfg: RunConfig, workdir: Path):
        self.cfg = cfg
        self.workdir = workdir


# ---- commands ---------------------------------------------------------------


def cmd_synth(ctx: Context) -> int:
    cfg = ctx.cfg
    spec = cfg.synthetic_spec()
    suite = synthetic.build_suite(spec, cfg.synthetic.n_train, cfg.synthetic.n_test)
    root = _resolve(ctx, cfg.paths.data_dir)
    try:
        (root / "train").mkdir(parents=True, exist_ok=True)
        (root / "test").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot write to {root}: {exc}") from exc
    train = []
    for sid, e2d, e3d in suite.train:
        save_feature_map(e2d, root / "train" / f"{sid}_2d.mafr")
        save_feature_map(e3d, root / "train" / f"{sid}_3d.mafr")
        train.append(Sample(sid, f"train/{sid}_2d.mafr", f"train/{sid}_3d.mafr", Label.NORMAL, None))
    test = []
    for sid, e2d, e3d, label, mask in suite.test:
        save_feature_map(e2d, root / "test" / f"{sid}_2d.mafr")
        save_feature_map(e3d, root / "test" / f"{sid}_3d.mafr")
        save_mask(mask, root / "test" / f"{sid}_mask.mafr")
        test.append(
            Sample(sid, f"test/{sid}_2d.mafr", f"test/{sid}_3d.mafr",
                   Label.ANOMALOUS if label else Label.NORMAL, f"test/{sid}_mask.mafr")
        )
    save_manifest(DatasetManifest(train, Split.TRAIN), root / "train.json")
    save_manifest(DatasetManifest(test, Split.TEST), root / "test.json")
    _write_json(root / "synthetic.json", {"spec": spec.to_dict(), "n_train": len(train), "n_test": cfg.synthetic.n_test})
    print(f"wrote {len(train)} train and {len(test)} test samples to {root}")
    return EXIT_OK


def cmd_train(ctx: Context) -> int:
    cfg = ctx.cfg
    manifest = _load_manifest(_resolve(ctx, cfg.paths.train_manifest))
    if manifest.split is not Split.TRAIN:
        raise DataError("training manifest must have split Train")
    if len(manifest) == 0:
        raise DataError("empty dataset")
    train_cfg = cfg.train_config()
    if train_cfg.shot_count is not None and train_cfg.shot_count > len(manifest):
        raise UsageError(f"--shots {train_cfg.shot_count} exceeds the {len(manifest)} training samples")
    model_cfg = cfg.model_config(*_manifest_dims(manifest))
    run_dir = _resolve(ctx, cfg.paths.run_dir)
    ckpt = _resolve(ctx, cfg.paths.checkpoint)
    every = cfg.train.checkpoint_every

    def on_epoch(epoch, params):
        if every and epoch % every == 0 and epoch != train_cfg.epochs:
            network.save_checkpoint(params, run_dir / "checkpoints" / f"epoch_{epoch:04d}")

    used = manifest
    if train_cfg.shot_count is not None:
        used = training.few_shot_subsample(manifest, train_cfg.shot_count, train_cfg.seed)
    params, log = training.fit_pairs(training.load_pairs(used), model_cfg, train_cfg, on_epoch=on_epoch)
    network.save_checkpoint(params, ckpt)
    doc = log.to_dict()
    doc["sample_ids"] = used.ids
    _write_json(run_dir / "trainlog.json", doc)
    _write_json(run_dir / "config.json", cfg.to_dict())
    last = log.epochs[-1]["total"] if log.epochs else float("nan")
    print(f"trained on {len(used)} samples for {train_cfg.epochs} epochs; final loss {last:.6f}; checkpoint {ckpt}")
    return EXIT_OK


def _save_png(values: np.ndarray, path: Path) -> None:
    from PIL import Image

    top = values.max()
    scaled = np.zeros_like(values) if top <= 0 else values / top
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def cmd_infer(ctx: Context, png: bool = False) -> int:
    cfg = ctx.cfg
    params = _load_checkpoint(_resolve(ctx, cfg.paths.checkpoint))
    manifest = _load_manifest(_resolve(ctx, cfg.paths.test_manifest))
    out = _resolve(ctx, cfg.paths.maps_dir)
    out.mkdir(parents=True, exist_ok=True)
    strategy = cfg.strategy()
    rows = []
    for sample in ev.load_eval_samples(manifest):
        res = ev.infer(params, sample.e2d, sample.e3d, strategy=strategy, sigma=cfg.inference.sigma,
                       mask_first=cfg.inference.mask_first)
        save_feature_map(FeatureMap(res.final.values[:, :, None].astype(np.float32)), out / f"{sample.id}.mafr")
        if png:
            _save_png(res.final.values, out / f"{sample.id}.png")
        rows.append((sample.id, sample.label, res.score))
    report = ev.EvalReport(None, None, {}, rows)
    (out / "scores.csv").write_text(ev.scores_csv(report))
    print(f"wrote {len(rows)} anomaly maps to {out}")
    return EXIT_OK


def _snapshot(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "inference": cfg.to_dict()["inference"]}


def cmd_eval(ctx: Context) -> int:
    cfg = ctx.cfg
    params = _load_checkpoint(_resolve(ctx, cfg.paths.checkpoint))
    manifest = _load_manifest(_resolve(ctx, cfg.paths.test_manifest))
    report = ev.evaluate_run(params, manifest, cfg.strategy(), cfg.inference.sigma, cfg.inference.limits,
                             cfg.inference.mask_first, _snapshot(cfg))
    out = _resolve(ctx, cfg.paths.report_dir)
    ev.write_report(report, out, title=cfg.strategy().value)
    print(ev.format_table([(cfg.strategy().value, report)]), end="")
    return EXIT_OK


def cmd_ablate(ctx: Context) -> int:
    cfg = ctx.cfg
    train_manifest = _load_manifest(_resolve(ctx, cfg.paths.train_manifest))
    test_manifest = _load_manifest(_resolve(ctx, cfg.paths.test_manifest))
    train_cfg = cfg.train_config()
    if train_cfg.shot_count is not None:
        train_manifest = training.few_shot_subsample(train_manifest, train_cfg.shot_count, train_cfg.seed)
    pairs = training.load_pairs(train_manifest)
    test = ev.load_eval_samples(test_manifest)
    model_cfg = cfg.model_config(pairs[0][0].channels, pairs[0][1].channels)
    out = _resolve(ctx, cfg.paths.ablation_dir)
    rows = ev.ablation_grid(pairs, test, model_cfg, train_cfg, cfg.inference.sigma, cfg.inference.limits,
                            cache_dir=out / "cache", mask_first=cfg.inference.mask_first)
    doc = ev.ablation_to_dict(rows)
    doc["seed"] = cfg.seed
    _write_json(out / "ablation.json", doc)
    table = ev.ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(ctx: Context, negative_control: bool = False) -> int:
    g = ctx.cfg.gradcheck
    hook = gradcheck.scale_one_gradient() if negative_control else None
    report = gradcheck.run_gradcheck(ctx.cfg.seed, g.trials, g.full_trials, g.d_2d, g.d_3d, g.fused_dim, g.size,
                                     perturb=hook)
    out = _resolve(ctx, ctx.cfg.paths.gradcheck_dir)
    _write_json(out / "gradcheck.json", report.to_dict())
    (out / "gradcheck.txt").write_text(report.table())
    print(report.table(), end="")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--workdir", default=".", help="base directory for every relative path")
    common.add_argument("--threads", type=int, help=f"worker cap (fallback: ${THREADS_ENV})")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.learning_rate=0.0005")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mafr", description="Fusion-restoration anomaly detection on feature maps.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", dest="paths.data_dir")
    p.add_argument("--n-train", dest="synthetic.n_train", type=int)
    p.add_argument("--n-test", dest="synthetic.n_test", type=int)

    model_flags = _Parser(add_help=False)
    model_flags.add_argument("--checkpoint", dest="paths.checkpoint")

    infer_flags = _Parser(add_help=False)
    infer_flags.add_argument("--manifest", dest="paths.test_manifest")
    infer_flags.add_argument("--strategy", dest="inference.strategy",
                             choices=["multiply", "add", "max", "2d", "3d"])
    infer_flags.add_argument("--sigma", dest="inference.sigma", type=float)
    infer_flags.add_argument("--smooth-first", dest="inference.mask_first", action="store_const", const=False)

    train_flags = _Parser(add_help=False)
    train_flags.add_argument("--train-manifest", dest="paths.train_manifest")
    train_flags.add_argument("--epochs", dest="train.epochs", type=int)
    train_flags.add_argument("--lr", dest="train.learning_rate", type=float)
    train_flags.add_argument("--shots", dest="train.shot_count", type=int)
    train_flags.add_argument("--run-dir", dest="paths.run_dir")

    p = sub.add_parser("train", parents=[common, model_flags, train_flags], help="train a model")
    p.add_argument("--checkpoint-every", dest="train.checkpoint_every", type=int)

    p = sub.add_parser("infer", parents=[common, model_flags, infer_flags], help="write anomaly maps")
    p.add_argument("--out", dest="paths.maps_dir")
    p.add_argument("--png", action="store_true", help="also write PNG previews")

    p = sub.add_parser("eval", parents=[common, model_flags, infer_flags], help="metrics report")
    p.add_argument("--out", dest="paths.report_dir")
    p.add_argument("--limits", dest="inference.limits", type=float, nargs="+")

    p = sub.add_parser("ablate", parents=[common, train_flags], help="loss and fusion ablation grid")
    p.add_argument("--test-manifest", dest="paths.test_manifest")
    p.add_argument("--sigma", dest="inference.sigma", type=float)
    p.add_argument("--out", dest="paths.ablation_dir")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--trials", dest="gradcheck.trials", type=int)
    p.add_argument("--full-trials", dest="gradcheck.full_trials", type=int)
    p.add_argument("--out", dest="paths.gradcheck_dir")
    p.add_argument("--negative-control", action="store_true",
                   help="corrupt one weight gradient; the check must then fail")
    return parser


def _threads(args_threads, cfg_threads):
    value = args_threads if args_threads is not None else cfg_threads
    if value is None and os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer") from exc
    if value is not None and value < 1:
        raise UsageError("thread count must be positive")
    return value


def _run(argv) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workdir = Path(args.workdir)
    if not workdir.is_dir():
        raise UsageError(f"workdir does not exist: {workdir}")
    if args.config:
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path if cfg_path.is_absolute() else workdir / cfg_path)
    else:
        cfg = RunConfig()
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    cfg = apply_overrides(cfg, overrides)
    ctx = Context(cfg, workdir)
    threads = _threads(args.threads, cfg.threads)
    commands = {
        "synth": lambda: cmd_synth(ctx),
        "train": lambda: cmd_train(ctx),
        "infer": lambda: cmd_infer(ctx, png=args.png),
        "eval": lambda: cmd_eval(ctx),
        "ablate": lambda: cmd_ablate(ctx),
        "gradcheck": lambda: cmd_gradcheck(ctx, negative_control=args.negative_control),
    }
    with threadpool_limits(limits=threads):
        return commands[args.command]()


def main(argv=None) -> int:
    try:
        return _run(sys.argv[1:] if argv is None else argv)
    except (UsageError, ConfigError) as exc:
        print(f"mafr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericalError as exc:
        print(f"mafr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FeatureFormatError, ValueError, OSError) as exc:
        print(f"mafr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
