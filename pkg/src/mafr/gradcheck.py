"""Finite-difference verification of every analytic gradient.

Numeric derivatives use the fourth-order central stencil on float64.
Each gradient tensor is scored as

    ||analytic - numeric|| / (max(||analytic||, ||numeric||) + noise / tol)

where ``noise`` is the round-off budget of the stencil,
``NOISE_ULPS * eps * max(|f|, 1) / step`` per entry (times sqrt(size)).
A score <= tol is therefore the usual combined test
``||a - n|| <= noise + tol * max(||a||, ||n||)``. The floor only matters for
gradients that are exactly or nearly zero (for example behind a dead ReLU),
whose numeric estimate is pure round-off.

Isolated layers and loss terms are checked entry by entry. The end-to-end
composite loss is checked entry by entry on a few trials and along one
random unit direction per tensor on every trial, with dropout replayed from
a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _layers as L
from . import losses, network

LAYER_TOL = 1e-5
END_TO_END_TOL = 1e-4
STEP = 1e-5
NOISE_ULPS = 16
_EPS = np.finfo(np.float64).eps


def noise_level(f_value: float, step: float = STEP) -> float:
    """Round-off budget of one stencil estimate."""
    return NOISE_ULPS * _EPS * max(abs(f_value), 1.0) / step


def rel_error(analytic, numeric, noise: float = 0.0, tol: float = LAYER_TOL) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = noise * np.sqrt(a.size) / tol
    scale = max(np.linalg.norm(a), np.linalg.norm(n)) + floor
    diff = np.linalg.norm(a - n)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def _stencil(at: Callable[[float], float], step: float) -> float:
    return (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12 * step)


def directional_derivative(f: Callable[[], float], x: np.ndarray, direction: np.ndarray, step: float = STEP):
    """d/dt f(x + t * direction) at t = 0 (x perturbed in place and restored)."""
    base = x.copy()

    def at(t):
        np.add(base, t * direction, out=x)
        return f()

    try:
        return _stencil(at, step)
    finally:
        x[...] = base


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Fourth-order central differences of ``f`` w.r.t. every entry of ``x``."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]

        def at(t):
            flat[i] = old + t
            return f()

        gflat[i] = _stencil(at, step)
        flat[i] = old
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    trials: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "trials": self.trials,
            "worst": self.worst,
            "passed": self.passed,
        }


@dataclass
class GradcheckReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}

    def table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{'check'.ljust(width)}  max_rel_error  tolerance  result"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{c.name.ljust(width)}  {c.max_rel_error:13.3e}  {c.tolerance:9.0e}  {status}")
        return "\n".join(lines) + "\n"


class _Tracker:
    def __init__(self, name, tol, trials):
        self.result = CheckResult(name, 0.0, tol, trials)

    def add(self, label, analytic, numeric, f_value=0.0):
        err = rel_error(analytic, numeric, noise_level(f_value), self.result.tolerance)
        if err > self.result.max_rel_error or not np.isfinite(err):
            self.result.max_rel_error = err if np.isfinite(err) else float("inf")
            self.result.worst = label


# ---- isolated layers -------------------------------------------------------


def _check_entries(tracker, trial, objective, analytic: dict, inputs: dict):
    f0 = objective()
    for name, arr in inputs.items():
        tracker.add(f"trial {trial}: {name}", analytic[name], numeric_grad(objective, arr), f0)


def check_linear(rng, trials, size=4, c_in=6, c_out=5):
    tr = _Tracker("linear", LAYER_TOL, trials)
    for t in range(trials):
        x = rng.standard_normal((size * size, c_in))
        w = rng.standard_normal((c_in, c_out))
        b = rng.standard_normal(c_out)
        g = rng.standard_normal((size * size, c_out))
        f = lambda: float((L.linear_forward(x, w, b) * g).sum())
        dx, dw, db = L.linear_backward(g, x, w)
        _check_entries(tr, t, f, {"x": dx, "weight": dw, "bias": db}, {"x": x, "weight": w, "bias": b})
    return tr.result


def check_gelu(rng, trials, size=4, c=6):
    tr = _Tracker("gelu", LAYER_TOL, trials)
    for t in range(trials):
        z = 2.0 * rng.standard_normal((size * size, c))
        g = rng.standard_normal(z.shape)
        f = lambda: float((L.gelu(z) * g).sum())
        _check_entries(tr, t, f, {"z": L.gelu_grad(z) * g}, {"z": z})
    return tr.result


def check_layernorm(rng, trials, size=4, c=6):
    tr = _Tracker("layernorm", LAYER_TOL, trials)
    for t in range(trials):
        a = rng.standard_normal((size * size, c))
        gamma = 1.0 + 0.5 * rng.standard_normal(c)
        beta = rng.standard_normal(c)
        g = rng.standard_normal(a.shape)
        f = lambda: float((L.layernorm_forward(a, gamma, beta)[0] * g).sum())
        _, cache = L.layernorm_forward(a, gamma, beta)
        da, dgamma, dbeta = L.layernorm_backward(g, cache, gamma)
        _check_entries(tr, t, f, {"a": da, "gamma": dgamma, "beta": dbeta}, {"a": a, "gamma": gamma, "beta": beta})
    return tr.result


def check_channel_gate(rng, trials, size=4, c=8, hidden=3):
    tr = _Tracker("cbam_channel", LAYER_TOL, trials)
    for t in range(trials):
        feat = rng.standard_normal((size * size, c))
        w1 = rng.standard_normal((c, hidden))
        w2 = rng.standard_normal((hidden, c))
        g = rng.standard_normal(feat.shape)
        f = lambda: float((L.channel_gate_forward(feat, w1, w2)[0] * g).sum())
        _, cache = L.channel_gate_forward(feat, w1, w2)
        dfeat, dw1, dw2 = L.channel_gate_backward(g, cache, w1, w2)
        _check_entries(tr, t, f, {"feat": dfeat, "w1": dw1, "w2": dw2}, {"feat": feat, "w1": w1, "w2": w2})
    return tr.result


def check_spatial_gate(rng, trials, size=4, c=8, k=7):
    tr = _Tracker("cbam_spatial", LAYER_TOL, trials)
    for t in range(trials):
        feat = rng.standard_normal((size * size, c))
        kernel = 0.3 * rng.standard_normal((2, k, k))
        g = rng.standard_normal(feat.shape)
        f = lambda: float((L.spatial_gate_forward(feat, kernel, size, size)[0] * g).sum())
        _, cache = L.spatial_gate_forward(feat, kernel, size, size)
        dfeat, dkernel = L.spatial_gate_backward(g, cache, kernel)
        _check_entries(tr, t, f, {"feat": dfeat, "kernel": dkernel}, {"feat": feat, "kernel": kernel})
    return tr.result


# ---- loss terms ------------------------------------------------------------


def _random_validity(rng, size):
    valid = rng.random((size, size)) > 0.3
    valid.flat[rng.choice(size * size, 2, replace=False)] = True
    return valid


def check_loss_term(name, rng, trials, size=4, d=6):
    fns = {
        "znssd": lambda e, r, v, g: losses._znssd(e, r, 1e-8, v, g),
        "smoothness": losses._smoothness,
        "census": lambda e, r, v, g: losses._census(e, r, 3, v, g),
    }
    fn = fns[name]
    tr = _Tracker(f"loss_{name}", LAYER_TOL, trials)
    for t in range(trials):
        e = rng.standard_normal((size, size, d))
        r = e + rng.standard_normal(e.shape)
        valid = _random_validity(rng, size) if t % 2 else None
        value, grad = fn(e, r, valid, True)
        tr.add(f"trial {t}", grad, numeric_grad(lambda: fn(e, r, valid, False)[0], r), value)
    return tr.result


# ---- end-to-end ------------------------------------------------------------


def _perturbed_params(config, seed, rng):
    # random init plus noise so biases and LayerNorm terms are not at their init values
    params = network.init_params(config, seed, dtype=np.float64)
    for k, v in params.tensors.items():
        params.tensors[k] = v + 0.1 * rng.standard_normal(v.shape)
    return params


def check_end_to_end(rng, trials, full_trials, d_2d=6, d_3d=9, fused_dim=8, size=4, weights=None,
                     perturb: Callable[[dict], dict] | None = None):
    """Composite training loss through the whole network, Train mode, f64."""
    weights = weights or losses.LossWeights()
    config = network.ModelConfig(d_2d=d_2d, d_3d=d_3d, fused_dim=fused_dim, cbam_reduction=4)
    tr = _Tracker("end_to_end", END_TO_END_TOL, trials)
    for t in range(trials):
        params = _perturbed_params(config, int(rng.integers(2**31)), rng)
        e2d = rng.standard_normal((size, size, d_2d))
        e3d = rng.standard_normal((size, size, d_3d))
        valid = _random_validity(rng, size)
        dropout_seed = int(rng.integers(2**31))

        def objective():
            r2d, r3d, _ = network.forward(params, e2d, e3d, network.TRAIN, np.random.default_rng(dropout_seed))
            return losses.total_loss(e2d, r2d, e3d, r3d, weights, valid).total

        r2d, r3d, cache = network.forward(params, e2d, e3d, network.TRAIN, np.random.default_rng(dropout_seed))
        _, g2, g3 = losses.loss_and_gradients(e2d, r2d, e3d, r3d, weights, valid)
        grads = network.backward(params, cache, g2, g3)
        if perturb is not None:
            grads = perturb(grads)
        f0 = objective()
        for name, arr in params.tensors.items():
            if t < full_trials:
                tr.add(f"trial {t}: {name}", grads[name], numeric_grad(objective, arr), f0)
            direction = rng.standard_normal(arr.shape)
            direction /= np.linalg.norm(direction)
            tr.add(
                f"trial {t}: {name} (directional)",
                float((grads[name] * direction).sum()),
                directional_derivative(objective, arr, direction),
                f0,
            )
    return tr.result


def run_gradcheck(seed: int = 0, trials: int = 100, full_trials: int = 3, d_2d=6, d_3d=9, fused_dim=8, size=4,
                  perturb=None) -> GradcheckReport:
    """All layer, loss-term and end-to-end checks; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for check in (check_linear, check_gelu, check_layernorm, check_channel_gate, check_spatial_gate):
        report.checks.append(check(rng, trials, size=size))
    for name in ("znssd", "smoothness", "census"):
        report.checks.append(check_loss_term(name, rng, trials, size=size))
    report.checks.append(
        check_end_to_end(rng, trials, full_trials, d_2d, d_3d, fused_dim, size, perturb=perturb)
    )
    return report


def scale_one_gradient(name: str = "enc.0.weight", factor: float = 1.01):
    """Negative-control hook: scales one weight gradient so the check must fail."""

    def hook(grads):
        grads = dict(grads)
        grads[name] = grads[name] * factor
        return grads

    return hook
