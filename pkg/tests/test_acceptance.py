"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
Timed sections run with BLAS pinned to one thread.
"""
import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mafr import evaluation as ev
from mafr import synthetic, training
from mafr.cli import main
from mafr.config import RunConfig
from mafr.features import FeatureMap, Modality
from mafr.gradcheck import run_gradcheck
from mafr.io import decode_feature_map, encode_feature_map, load_feature_map, save_feature_map
from mafr.losses import census, smoothness, znssd
from mafr.metrics import aupro, auroc

try:
    from . import oracles
except ImportError:  # running as a script
    import oracles

pytestmark = pytest.mark.slow

RESULTS: dict[int, str] = {}


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS[number] = line
    print(line, flush=True)
    assert ok, line


class Timer:
    def __enter__(self):
        self._limit = threadpool_limits(1)
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        self._limit.unregister()


# ---- shared reference suite (default config, root seed 0) -----------------


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    cfg = RunConfig()
    spec = cfg.synthetic_spec()
    suite = synthetic.build_suite(spec, cfg.synthetic.n_train, cfg.synthetic.n_test)
    pairs = [(a, b) for _, a, b in suite.train]
    test = [ev.EvalSample(i, a, b, lab, m) for i, a, b, lab, m in suite.test]
    return {
        "cfg": cfg,
        "spec": spec,
        "pairs": pairs,
        "test": test,
        "model": cfg.model_config(spec.d_2d, spec.d_3d),
        "train": cfg.train_config(),
    }


# ---- 1 -----------------------------------------------------------------------


def test_criterion_1_gradients():
    with Timer() as t:
        report = run_gradcheck(seed=0, trials=100, full_trials=3, d_2d=6, d_3d=9, fused_dim=8, size=4)
    print(report.table())
    layer_worst = max(c.max_rel_error for c in report.checks if c.name != "end_to_end")
    e2e = next(c for c in report.checks if c.name == "end_to_end")
    ok = report.passed and all(c.trials >= 100 for c in report.checks) and t.seconds < 120
    record(1, ok, f"layers/losses max rel err {layer_worst:.2e} (<= 1e-5), end-to-end {e2e.max_rel_error:.2e} "
                  f"(<= 1e-4), {e2e.trials} trials, {t.seconds:.1f}s (< 120s)")


# ---- 2 -----------------------------------------------------------------------


def test_criterion_2_loss_identities():
    failures = []
    with Timer() as t:
        rng = np.random.default_rng(0)
        for _ in range(100):
            e = rng.standard_normal((4, 4, 3))
            if znssd(e, e) != 0.0 or census(e, e, int(rng.choice([1, 3, 5]))) != 0.0:
                failures.append("L(E,E) != 0")
            grid = rng.integers(-512, 512, (4, 4, 3)) / 64.0
            if smoothness(grid, grid + rng.integers(-320, 320) / 64.0) != 0.0:
                failures.append("smoothness(E, E + c) != 0")
            sig = rng.uniform(1, 3, 3)
            base = (e - e.mean(axis=(0, 1))) / e.std(axis=(0, 1)) * sig
            if znssd(base, rng.uniform(0.5, 4, 3) * base + rng.uniform(-5, 5, 3), eps=1e-8) > 1e-6:
                failures.append("znssd affine invariance")
        z = znssd(np.array([[[1.0], [3.0]]]), np.array([[[3.0], [1.0]]]), eps=1e-12)
        c = census(np.array([[[0.0], [3.0]]]), np.array([[[3.0], [0.0]]]), 3)
        s = smoothness(np.zeros((2, 2, 1)), np.array([[[0.0], [1.0]], [[0.0], [1.0]]]))
        oracle = (
            oracles.znssd(np.array([[[1.0], [3.0]]]), np.array([[[3.0], [1.0]]]), 0.0),
            oracles.census(np.array([[[0.0], [3.0]]]), np.array([[[3.0], [0.0]]]), 3),
            oracles.smoothness(np.zeros((2, 2, 1)), np.array([[[0.0], [1.0]], [[0.0], [1.0]]])),
        )
    hand = abs(z - 4.0) <= 1e-6 and abs(c - 1.0) <= 1e-6 and abs(s - 0.5) <= 1e-6
    hand = hand and oracle == (4.0, 1.0, 0.5)
    ok = not failures and hand and t.seconds < 10
    record(2, ok, f"identities exact on 100 draws ({len(failures)} failures); ZNSSD {z:.7f}, census {c:.7f}, "
                  f"smoothness {s:.7f}; {t.seconds:.2f}s (< 10s)")


# ---- 3 -----------------------------------------------------------------------


def test_criterion_3_metric_oracles():
    with Timer() as t:
        rng = np.random.default_rng(0)
        auroc_err = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 8, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
            auroc_err = max(auroc_err, abs(auroc(scores, labels) - oracles.auroc_pairs(scores, labels)))
        example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        aupro_err = 0.0
        for _ in range(200):
            s = np.round(rng.random((8, 8)), int(rng.integers(1, 4)))
            m = rng.random((8, 8)) < 0.25
            m[0, 0], m[7, 7] = True, False
            aupro_err = max(aupro_err, abs(aupro([s], [m], 0.3) - oracles.aupro_sweep([s], [m], 0.3)))
        two = aupro([np.array([[0.9, 0.1], [0.2, 0.8]])], [np.array([[True, False], [False, True]])], 0.3)
    ok = auroc_err <= 1e-9 and example == 0.75 and aupro_err <= 1e-3 and abs(two - 1.0) < 1e-12 and t.seconds < 60
    record(3, ok, f"AUROC max err {auroc_err:.1e} (<= 1e-9), example {example}; AUPRO max err {aupro_err:.1e} "
                  f"(<= 1e-3), 2x2 case {two}; {t.seconds:.1f}s (< 60s)")


# ---- 4 -----------------------------------------------------------------------


def test_criterion_4_synthetic_end_to_end(reference):
    r = reference
    spec = r["spec"]
    with Timer() as t:
        params, log = training.fit_pairs(r["pairs"], r["model"], r["train"])
        rep = ev.evaluate_samples(params, r["test"])
    scores = np.array([s for _, _, s in rep.scores])
    labels = np.array([lab for _, lab, _ in rep.scores])
    ratio = log.epochs[-1]["total"] / log.epochs[0]["total"]
    magnitude = spec.anomaly.magnitude / spec.noise_sigma
    ok = (rep.i_auroc >= 0.90 and rep.p_auroc >= 0.90 and t.seconds < 300 and magnitude >= 3
          and len(r["pairs"]) == 20 and labels.sum() == 20 and len(labels) == 40)
    print(f"  mean score anomalous {scores[labels == 1].mean():.4f} vs normal {scores[labels == 0].mean():.4f}; "
          f"loss ratio epoch 100 / epoch 1 = {ratio:.3f}")
    record(4, ok, f"I-AUROC {rep.i_auroc:.4f} (>= 0.90), P-AUROC {rep.p_auroc:.4f} (>= 0.90), "
                  f"{t.seconds:.1f}s (< 300s)")
    assert scores[labels == 1].mean() > scores[labels == 0].mean()


# ---- 5 -----------------------------------------------------------------------


def test_criterion_5_ablation_ordering(reference, tmp_path):
    r = reference
    rows = ev.ablation_grid(r["pairs"], r["test"], r["model"], r["train"], cache_dir=tmp_path)
    print(ev.ablation_table(rows))
    i = {row.name: row.report.i_auroc for row in rows}
    mul, add = i["Psi_2D * Psi_3D"], i["Psi_2D + Psi_3D"]
    single = max(i["Psi_2D"], i["Psi_3D"])
    full, cen = i["L_sim+census+smooth"], i["L_census"]
    fusion_ok = mul >= add >= single
    loss_ok = full >= cen - 0.02
    record(5, fusion_ok and loss_ok,
           f"Multiply {mul:.4f} >= Add {add:.4f} >= max(2D, 3D) {single:.4f}: {fusion_ok}; "
           f"three-term {full:.4f} >= census-only {cen:.4f} - 0.02: {loss_ok}")


# ---- 6 -----------------------------------------------------------------------

PIPELINE = [
    ["synth"],
    ["train", "--checkpoint-every", "50"],
    ["infer", "--png"],
    ["eval"],
    ["ablate", "--epochs", "5"],
    ["gradcheck", "--trials", "5", "--full-trials", "1"],
]


def _run_pipeline(root):
    root.mkdir()
    codes = [main([*cmd, "--workdir", str(root)]) for cmd in PIPELINE]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


def _strip_wall_time(raw):
    return [{k: v for k, v in e.items() if k != "wall_time"} for e in json.loads(raw)["epochs"]]


def test_criterion_6_determinism(tmp_path):
    codes_a, a = _run_pipeline(tmp_path / "a")
    codes_b, b = _run_pipeline(tmp_path / "b")
    differing = []
    for key in sorted(set(a) | set(b)):
        if key not in a or key not in b:
            differing.append(key)
        elif key.endswith("trainlog.json"):
            if _strip_wall_time(a[key]) != _strip_wall_time(b[key]):
                differing.append(key)
        elif a[key] != b[key]:
            differing.append(key)
    kinds = {
        "checkpoints": sum(1 for k in a if "checkpoint" in k),
        "maps": sum(1 for k in a if k.startswith("run/maps/")),
        "reports": sum(1 for k in a if k.startswith(("run/report/", "run/ablation/", "run/gradcheck/"))),
    }
    ok = codes_a == codes_b == [0] * len(PIPELINE) and not differing and all(kinds.values())
    record(6, ok, f"{len(a)} files from two identical runs, {len(differing)} differ "
                  f"({kinds['checkpoints']} checkpoint, {kinds['maps']} map, {kinds['reports']} report files)")


# ---- 7 -----------------------------------------------------------------------


def test_criterion_7_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bad = 0
    for k in range(1000):
        h, w, d = (int(x) for x in rng.integers(1, 9, size=3))
        data = (rng.standard_normal((h, w, d)) * 10.0 ** rng.integers(-20, 20)).astype(np.float32)
        if k % 2:
            fmap = FeatureMap(data, Modality.THREE_D, rng.random((h, w)) < 0.5)
        else:
            fmap = FeatureMap(data, Modality.TWO_D)
        if k % 10 == 0:
            path = tmp_path / f"{k}.mafr"
            save_feature_map(fmap, path)
            back = load_feature_map(path)
        else:
            back = decode_feature_map(encode_feature_map(fmap))
        same = (back.modality is fmap.modality
                and back.data.tobytes() == fmap.data.tobytes()
                and np.array_equal(back.validity, fmap.validity))
        bad += not same
    record(7, bad == 0, f"1000 random maps, {bad} mismatches (100 through files, 900 in memory)")


# ---- 8 -----------------------------------------------------------------------


def test_criterion_8_few_shot(tmp_path):
    root = tmp_path / "fs"
    root.mkdir()
    base = ["--workdir", str(root)]
    assert main(["synth", "--n-train", "50", *base]) == 0
    results, problems = {}, []
    for n in (5, 10, 50):
        run_dir = f"run_{n}"
        extra = ["--checkpoint", f"{run_dir}/checkpoint"]
        if main(["train", "--shots", str(n), "--run-dir", run_dir, *extra, *base]) != 0:
            problems.append(f"train {n}")
            continue
        log = json.loads((root / run_dir / "trainlog.json").read_text())
        if len(set(log["sample_ids"])) != n or len(log["sample_ids"]) != n:
            problems.append(f"{n}-shot used {len(log['sample_ids'])} samples")
        if main(["eval", "--out", f"{run_dir}/report", *extra, *base]) != 0:
            problems.append(f"eval {n}")
            continue
        doc = json.loads((root / run_dir / "report" / "report.json").read_text())
        if list(doc["metrics"]) != ["I-AUROC", "P-AUROC", "AUPRO@30%", "AUPRO@1%"]:
            problems.append(f"columns {list(doc['metrics'])}")
        results[n] = doc["metrics"]
    for n, m in results.items():
        print(f"  {n:>2}-shot  " + "  ".join(f"{k} {v:.4f}" for k, v in m.items()))
    trend = len(results) == 3 and results[50]["I-AUROC"] >= results[5]["I-AUROC"]
    detail = "; ".join(f"{n}-shot I-AUROC {m['I-AUROC']:.4f}" for n, m in results.items())
    record(8, not problems and trend, f"exact shot counts and four columns ({problems or 'ok'}); {detail}; "
                                      f"50-shot >= 5-shot: {trend}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
