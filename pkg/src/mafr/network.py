"""Fusion encoder and the two attention-gated restoration decoders.

All stacks act per pixel. A stack of widths ``[w0, ..., wL]`` has L linear
layers; every layer except the last is followed by GELU, layer norm and
dropout (in that order). Each decoder adds a linear skip projection of the
fused input to its stack output and then refines the full H x W x C map with
CBAM (channel gate, then spatial gate).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _layers as L
from .features import FeatureFormatError, FeatureMap, Modality
from .io import decode_feature_map, encode_feature_map, tensor_to_feature_map

# Widths used at the backbone dimensions of the original setting (768 + 1152 -> 968).
FULL_SIZE_DIMS = (768, 1152, 968)
FULL_SIZE_WIDTHS = {
    "encoder": [1920, 1536, 1152, 968],
    "decoder_2d": [968, 904, 840, 768],
    "decoder_3d": [968, 1032, 1096, 1152],
}

TRAIN = "train"
EVAL = "eval"


def _ramp(start: int, stop: int, n_layers: int) -> list[int]:
    return [int(np.floor(start + (stop - start) * i / n_layers + 0.5)) for i in range(n_layers + 1)]


def default_widths(d_2d: int, d_3d: int, fused: int) -> dict[str, list[int]]:
    if (d_2d, d_3d, fused) == FULL_SIZE_DIMS:
        return {k: list(v) for k, v in FULL_SIZE_WIDTHS.items()}
    d_in = d_2d + d_3d
    return {
        "encoder": [d_in, max(1, round(0.8 * d_in)), max(1, round(0.6 * d_in)), fused],
        "decoder_2d": _ramp(fused, d_2d, 3),
        "decoder_3d": _ramp(fused, d_3d, 3),
    }


@dataclass
class ModelConfig:
    d_2d: int = 768
    d_3d: int = 1152
    fused_dim: int | None = None
    encoder_widths: list[int] | None = None
    decoder_2d_widths: list[int] | None = None
    decoder_3d_widths: list[int] | None = None
    dropout: float = 0.1
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    use_skip: bool = True
    use_cbam: bool = True

    def __post_init__(self):
        if self.fused_dim is None:
            # keep the 968 / 1920 compression ratio
            self.fused_dim = max(1, round((self.d_2d + self.d_3d) * 968 / 1920))
        widths = default_widths(self.d_2d, self.d_3d, self.fused_dim)
        if self.encoder_widths is None:
            self.encoder_widths = widths["encoder"]
        if self.decoder_2d_widths is None:
            self.decoder_2d_widths = widths["decoder_2d"]
        if self.decoder_3d_widths is None:
            self.decoder_3d_widths = widths["decoder_3d"]
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.decoder_2d_widths = [int(w) for w in self.decoder_2d_widths]
        self.decoder_3d_widths = [int(w) for w in self.decoder_3d_widths]
        self.validate()

    def validate(self):
        for name in ("encoder_widths", "decoder_2d_widths", "decoder_3d_widths"):
            ws = getattr(self, name)
            if len(ws) < 2 or min(ws) < 1:
                raise ValueError(f"{name} needs at least two positive widths")
        if self.encoder_widths[0] != self.d_2d + self.d_3d:
            raise ValueError("encoder input width must equal d_2d + d_3d")
        if self.encoder_widths[-1] != self.fused_dim:
            raise ValueError("encoder output width must equal fused_dim")
        if self.decoder_2d_widths[0] != self.fused_dim or self.decoder_3d_widths[0] != self.fused_dim:
            raise ValueError("decoder input widths must equal fused_dim")
        if self.decoder_2d_widths[-1] != self.d_2d or self.decoder_3d_widths[-1] != self.d_3d:
            raise ValueError("decoder output widths must match the modality dims")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.cbam_reduction < 1:
            raise ValueError("cbam_reduction must be positive")
        if self.cbam_kernel < 1 or self.cbam_kernel % 2 == 0:
            raise ValueError("cbam_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    init_seed: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.init_seed)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def equals(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            self.tensors[k].dtype == other.tensors[k].dtype and np.array_equal(self.tensors[k], other.tensors[k])
            for k in self.tensors
        )


def _stack_names(prefix: str, n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        names += [f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"]
        if i < n_layers - 1:
            names += [f"{prefix}.{i}.ln_gamma", f"{prefix}.{i}.ln_beta"]
    return names


def cbam_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform fan-in initialisation: weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    tensors: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def add_stack(prefix, widths):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            tensors[f"{prefix}.{i}.weight"] = uniform((a, b), a)
            tensors[f"{prefix}.{i}.bias"] = np.zeros(b, dtype=dtype)
            if i < len(widths) - 2:
                tensors[f"{prefix}.{i}.ln_gamma"] = np.ones(b, dtype=dtype)
                tensors[f"{prefix}.{i}.ln_beta"] = np.zeros(b, dtype=dtype)

    add_stack("enc", config.encoder_widths)
    for prefix, widths in (("dec2d", config.decoder_2d_widths), ("dec3d", config.decoder_3d_widths)):
        add_stack(prefix, widths)
        c_out = widths[-1]
        if config.use_skip:
            tensors[f"{prefix}.skip.weight"] = uniform((widths[0], c_out), widths[0])
            tensors[f"{prefix}.skip.bias"] = np.zeros(c_out, dtype=dtype)
        if config.use_cbam:
            hid = cbam_hidden(c_out, config.cbam_reduction)
            k = config.cbam_kernel
            tensors[f"{prefix}.cbam.w1"] = uniform((c_out, hid), c_out)
            tensors[f"{prefix}.cbam.w2"] = uniform((hid, c_out), hid)
            tensors[f"{prefix}.cbam.kernel"] = uniform((2, k, k), 2 * k * k)
    return ModelParams(config, tensors, seed)


def _as_array(x, dtype):
    if isinstance(x, FeatureMap):
        x = x.data
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected an H x W x D map, got shape {x.shape}")
    return x.astype(dtype, copy=False)


# ---- stacks ---------------------------------------------------------------


def _stack_forward(t, prefix, widths, x, train, rng, p):
    caches = []
    n_layers = len(widths) - 1
    for i in range(n_layers):
        w, b = t[f"{prefix}.{i}.weight"], t[f"{prefix}.{i}.bias"]
        z = L.linear_forward(x, w, b)
        if i == n_layers - 1:
            caches.append((x, None, None, None))
            x = z
            break
        a = L.gelu(z)
        y, ln_cache = L.layernorm_forward(a, t[f"{prefix}.{i}.ln_gamma"], t[f"{prefix}.{i}.ln_beta"])
        mask = L.dropout_mask(rng, y.shape, p, y.dtype.type) if train else None
        if mask is not None:
            y = y * mask
        caches.append((x, z, ln_cache, mask))
        x = y
    return x, caches


def _stack_backward(t, prefix, caches, dy, grads):
    for i in reversed(range(len(caches))):
        x, z, ln_cache, mask = caches[i]
        if z is not None:
            if mask is not None:
                dy = dy * mask
            da, dg, dbeta = L.layernorm_backward(dy, ln_cache, t[f"{prefix}.{i}.ln_gamma"])
            grads[f"{prefix}.{i}.ln_gamma"] = dg
            grads[f"{prefix}.{i}.ln_beta"] = dbeta
            dy = da * L.gelu_grad(z)
        dx, dw, db = L.linear_backward(dy, x, t[f"{prefix}.{i}.weight"])
        grads[f"{prefix}.{i}.weight"] = dw
        grads[f"{prefix}.{i}.bias"] = db
        dy = dx
    return dy


# ---- public forward ------------------------------------------------------


@dataclass(eq=False)
class ForwardCache:
    params: ModelParams
    mode: str
    height: int
    width: int
    encoder: list = field(default_factory=list)
    decoders: dict = field(default_factory=dict)
    fused: np.ndarray | None = None


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    return mode == TRAIN


def _encode(params, e2d, e3d, train, rng):
    cfg = params.config
    dtype = params.dtype
    a2 = _as_array(e2d, dtype)
    a3 = _as_array(e3d, dtype)
    if a2.shape[:2] != a3.shape[:2]:
        raise ValueError(f"2D map {a2.shape[:2]} and 3D map {a3.shape[:2]} are not spatially aligned")
    if a2.shape[2] != cfg.d_2d or a3.shape[2] != cfg.d_3d:
        raise ValueError(
            f"channel mismatch: got ({a2.shape[2]}, {a3.shape[2]}), model expects ({cfg.d_2d}, {cfg.d_3d})"
        )
    h, w = a2.shape[:2]
    x = np.concatenate([a2.reshape(h * w, -1), a3.reshape(h * w, -1)], axis=1)
    fused, caches = _stack_forward(params.tensors, "enc", cfg.encoder_widths, x, train, rng, cfg.dropout)
    return fused, caches, h, w


def encode(params: ModelParams, e2d, e3d, mode=EVAL, rng=None) -> np.ndarray:
    """Fused per-pixel embedding, shape H x W x fused_dim."""
    train = _check_mode(mode)
    fused, _, h, w = _encode(params, e2d, e3d, train, rng)
    return fused.reshape(h, w, -1)


def _decode(params, prefix, widths, fused, h, w, train, rng, gates_open):
    cfg = params.config
    t = params.tensors
    pre, stack_cache = _stack_forward(t, prefix, widths, fused, train, rng, cfg.dropout)
    if cfg.use_skip:
        pre = pre + L.linear_forward(fused, t[f"{prefix}.skip.weight"], t[f"{prefix}.skip.bias"])
    cache = {"stack": stack_cache, "ch": None, "sp": None}
    out = pre
    if cfg.use_cbam:
        out, cache["ch"] = L.channel_gate_forward(out, t[f"{prefix}.cbam.w1"], t[f"{prefix}.cbam.w2"], gates_open)
        out, cache["sp"] = L.spatial_gate_forward(out, t[f"{prefix}.cbam.kernel"], h, w, gates_open)
    return out, pre, cache


def _decoder_spec(params, modality):
    modality = Modality(modality)
    if modality is Modality.TWO_D:
        return "dec2d", params.config.decoder_2d_widths
    return "dec3d", params.config.decoder_3d_widths


def decode(params: ModelParams, fused, modality, mode=EVAL, rng=None, gates_open=False) -> FeatureMap:
    """Restore one modality from a fused H x W x F map."""
    train = _check_mode(mode)
    fused = np.asarray(fused, dtype=params.dtype)
    if fused.ndim != 3 or fused.shape[2] != params.config.fused_dim:
        raise ValueError(f"fused map must be H x W x {params.config.fused_dim}, got {fused.shape}")
    h, w = fused.shape[:2]
    prefix, widths = _decoder_spec(params, modality)
    out, _, _ = _decode(params, prefix, widths, fused.reshape(h * w, -1), h, w, train, rng, gates_open)
    return FeatureMap(out.reshape(h, w, -1).astype(np.float32), Modality(modality))


def forward(params: ModelParams, e2d, e3d, mode=EVAL, rng=None, gates_open=False, return_pre=False):
    """Encode both modalities and restore each one.

    Returns ``(recon_2d, recon_3d, cache)`` as H x W x D arrays in the params'
    dtype. With ``return_pre`` the pre-attention maps are appended.
    """
    train = _check_mode(mode)
    if train and rng is None and params.config.dropout > 0:
        raise ValueError("train mode needs an rng for dropout")
    fused, enc_cache, h, w = _encode(params, e2d, e3d, train, rng)
    cache = ForwardCache(params, mode, h, w, enc_cache, fused=fused)
    outs, pres = [], []
    for mod in (Modality.TWO_D, Modality.THREE_D):
        prefix, widths = _decoder_spec(params, mod)
        out, pre, dcache = _decode(params, prefix, widths, fused, h, w, train, rng, gates_open)
        cache.decoders[prefix] = dcache
        outs.append(out.reshape(h, w, -1))
        pres.append(pre.reshape(h, w, -1))
    if return_pre:
        return outs[0], outs[1], cache, pres[0], pres[1]
    return outs[0], outs[1], cache


def backward(params: ModelParams, cache: ForwardCache, d_recon_2d, d_recon_3d) -> dict[str, np.ndarray]:
    """Gradients of a scalar objective w.r.t. every parameter tensor."""
    if cache.params is not params:
        raise ValueError("forward cache was produced with different parameters")
    cfg = params.config
    t = params.tensors
    h, w = cache.height, cache.width
    grads: dict[str, np.ndarray] = {}
    d_fused = np.zeros_like(cache.fused)
    for prefix, dout in (("dec2d", d_recon_2d), ("dec3d", d_recon_3d)):
        dout = np.asarray(dout, dtype=params.dtype).reshape(h * w, -1)
        dcache = cache.decoders[prefix]
        if cfg.use_cbam:
            dout, grads[f"{prefix}.cbam.kernel"] = L.spatial_gate_backward(dout, dcache["sp"], t[f"{prefix}.cbam.kernel"])
            dout, grads[f"{prefix}.cbam.w1"], grads[f"{prefix}.cbam.w2"] = L.channel_gate_backward(
                dout, dcache["ch"], t[f"{prefix}.cbam.w1"], t[f"{prefix}.cbam.w2"]
            )
        if cfg.use_skip:
            dx, grads[f"{prefix}.skip.weight"], grads[f"{prefix}.skip.bias"] = L.linear_backward(
                dout, cache.fused, t[f"{prefix}.skip.weight"]
            )
            d_fused += dx
        d_fused += _stack_backward(t, prefix, dcache["stack"], dout, grads)
    _stack_backward(t, "enc", cache.encoder, d_fused, grads)
    return {k: grads[k].astype(params.dtype, copy=False) for k in t}


# ---- checkpoints ----------------------------------------------------------

CHECKPOINT_INDEX = "index.json"


def save_checkpoint(params: ModelParams, directory) -> Path:
    """Write one feature-map container per tensor plus a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(params.tensors.items()):
        fname = f"tensor_{i:03d}.mafr"
        (directory / fname).write_bytes(encode_feature_map(tensor_to_feature_map(arr)))
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    index = {
        "format": "mafr-checkpoint",
        "version": 1,
        "init_seed": int(params.init_seed),
        "architecture": params.config.to_dict(),
        "tensors": entries,
    }
    (directory / CHECKPOINT_INDEX).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> ModelParams:
    try:
        return _load_checkpoint(Path(directory))
    except (KeyError, TypeError, AttributeError) as exc:
        raise FeatureFormatError(f"malformed checkpoint index in {directory}: {exc!r}") from exc


def _load_checkpoint(directory: Path) -> ModelParams:
    try:
        index = json.loads((directory / CHECKPOINT_INDEX).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FeatureFormatError(f"unreadable checkpoint index in {directory}: {exc}") from exc
    if index.get("format") != "mafr-checkpoint" or index.get("version") != 1:
        raise FeatureFormatError("not a version-1 checkpoint")
    try:
        config = ModelConfig(**index["architecture"])
    except (TypeError, ValueError) as exc:
        raise FeatureFormatError(f"bad architecture block: {exc}") from exc
    tensors = {}
    for entry in index["tensors"]:
        path = directory / entry["file"]
        try:
            fmap = decode_feature_map(path.read_bytes())
        except OSError as exc:
            raise FeatureFormatError(f"missing tensor file {path}") from exc
        shape = tuple(entry["shape"])
        if fmap.data.size != int(np.prod(shape)):
            raise FeatureFormatError(f"tensor {entry['name']} size does not match its shape")
        tensors[entry["name"]] = fmap.data.reshape(shape).copy()
    reference = init_params(config, 0)
    if list(reference.tensors) != list(tensors) or any(
        reference.tensors[k].shape != tensors[k].shape for k in tensors
    ):
        raise FeatureFormatError("checkpoint tensors do not match the declared architecture")
    return ModelParams(config, tensors, int(index.get("init_seed", 0)))
