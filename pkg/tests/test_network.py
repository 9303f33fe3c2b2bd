import json

import numpy as np
import pytest

from mafr import _layers as L
from mafr import network
from mafr.features import FeatureFormatError, FeatureMap, Modality

SMALL = network.ModelConfig(d_2d=6, d_3d=9, fused_dim=8, cbam_reduction=4)


def _inputs(rng, h=4, w=4, cfg=SMALL):
    return rng.standard_normal((h, w, cfg.d_2d)), rng.standard_normal((h, w, cfg.d_3d))


def test_full_size_dims_and_widths():
    cfg = network.ModelConfig()
    assert cfg.fused_dim == 968
    assert cfg.encoder_widths == [1920, 1536, 1152, 968]
    assert cfg.decoder_2d_widths == [968, 904, 840, 768]
    assert cfg.decoder_3d_widths == [968, 1032, 1096, 1152]
    params = network.init_params(cfg, seed=0)
    assert params["enc.0.weight"].shape == (1920, 1536)
    assert params["dec2d.skip.weight"].shape == (968, 768)
    assert params["dec3d.cbam.kernel"].shape == (2, 7, 7)


def test_full_size_forward_shapes():
    params = network.init_params(network.ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    e2d = rng.standard_normal((16, 16, 768)).astype(np.float32)
    e3d = rng.standard_normal((16, 16, 1152)).astype(np.float32)
    assert network.encode(params, e2d, e3d).shape == (16, 16, 968)
    r2d, r3d, _ = network.forward(params, e2d, e3d)
    assert r2d.shape == (16, 16, 768) and r3d.shape == (16, 16, 1152)


def test_init_is_deterministic_and_follows_the_rule():
    a = network.init_params(SMALL, seed=5)
    b = network.init_params(SMALL, seed=5)
    assert a.equals(b)
    assert not a.equals(network.init_params(SMALL, seed=6))
    for name, arr in a.tensors.items():
        assert arr.dtype == np.float32
        if name.endswith("bias") or name.endswith("ln_beta"):
            assert not arr.any()
        elif name.endswith("ln_gamma"):
            assert np.all(arr == 1)
        else:
            fan_in = arr.shape[0] if arr.ndim == 2 else arr.shape[0] * arr.shape[1] * arr.shape[2]
            assert np.abs(arr).max() <= np.sqrt(1.0 / fan_in)


def test_eval_forward_is_pure():
    params = network.init_params(SMALL, 1)
    e2d, e3d = _inputs(np.random.default_rng(0))
    a = network.forward(params, e2d, e3d)
    b = network.forward(params, e2d, e3d)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_train_mode_needs_rng_and_applies_dropout():
    params = network.init_params(SMALL, 1)
    e2d, e3d = _inputs(np.random.default_rng(0))
    with pytest.raises(ValueError):
        network.forward(params, e2d, e3d, network.TRAIN)
    t1 = network.forward(params, e2d, e3d, network.TRAIN, np.random.default_rng(0))[0]
    t2 = network.forward(params, e2d, e3d, network.TRAIN, np.random.default_rng(0))[0]
    ev = network.forward(params, e2d, e3d)[0]
    assert np.array_equal(t1, t2) and not np.allclose(t1, ev)


def test_encode_is_position_wise():
    params = network.init_params(SMALL, 2)
    rng = np.random.default_rng(1)
    e2d, e3d = _inputs(rng, 3, 5)
    perm = rng.permutation(15)

    def shuffle(x):
        return x.reshape(15, -1)[perm].reshape(3, 5, -1)

    out = network.encode(params, e2d, e3d)
    np.testing.assert_array_equal(network.encode(params, shuffle(e2d), shuffle(e3d)), shuffle(out))


def test_encode_rejects_misaligned_or_wrong_channels():
    params = network.init_params(SMALL, 0)
    with pytest.raises(ValueError):
        network.encode(params, np.zeros((4, 4, 6)), np.zeros((4, 5, 9)))
    with pytest.raises(ValueError):
        network.encode(params, np.zeros((4, 4, 7)), np.zeros((4, 4, 9)))
    with pytest.raises(ValueError):
        network.decode(params, np.zeros((4, 4, 5)), Modality.TWO_D)


def test_decode_shapes_and_gates_open_hook():
    params = network.init_params(SMALL, 3)
    e2d, e3d = _inputs(np.random.default_rng(2))
    fused = network.encode(params, e2d, e3d)
    out = network.decode(params, fused, Modality.THREE_D)
    assert isinstance(out, FeatureMap) and out.shape == (4, 4, 9)
    r2d, r3d, _, pre2d, pre3d = network.forward(params, e2d, e3d, gates_open=True, return_pre=True)
    np.testing.assert_array_equal(r2d, pre2d)
    np.testing.assert_array_equal(r3d, pre3d)


def test_cbam_gates_in_open_interval():
    rng = np.random.default_rng(4)
    feat = rng.standard_normal((16, 8))
    _, ch = L.channel_gate_forward(feat, rng.standard_normal((8, 2)), rng.standard_normal((2, 8)))
    gate = ch[8]
    assert np.all((gate > 0) & (gate < 1))
    _, sp = L.spatial_gate_forward(feat, rng.standard_normal((2, 7, 7)), 4, 4)
    assert np.all((sp[3] > 0) & (sp[3] < 1))


def test_uniform_map_gives_uniform_spatial_attention():
    rng = np.random.default_rng(5)
    feat = np.tile(rng.standard_normal(8), (20, 1))
    _, cache = L.spatial_gate_forward(feat, rng.standard_normal((2, 7, 7)), 4, 5)
    assert np.ptp(cache[3]) == 0


def test_shift_matrices_replicate_padding():
    s = L.shift_matrices(4, 3)
    x = np.array([10.0, 20.0, 30.0, 40.0])
    np.testing.assert_array_equal(s[0] @ x, [10, 10, 20, 30])
    np.testing.assert_array_equal(s[2] @ x, [20, 30, 40, 40])


def test_backward_zero_output_grads_and_shapes():
    params = network.init_params(SMALL, 0)
    e2d, e3d = _inputs(np.random.default_rng(0))
    r2d, r3d, cache = network.forward(params, e2d, e3d, network.TRAIN, np.random.default_rng(0))
    grads = network.backward(params, cache, np.zeros_like(r2d), np.zeros_like(r3d))
    assert set(grads) == set(params.tensors)
    for k, g in grads.items():
        assert g.shape == params[k].shape and g.dtype == params[k].dtype and not g.any()


def test_backward_rejects_stale_cache():
    params = network.init_params(SMALL, 0)
    e2d, e3d = _inputs(np.random.default_rng(0))
    r2d, r3d, cache = network.forward(params, e2d, e3d)
    with pytest.raises(ValueError):
        network.backward(params.copy(), cache, r2d, r3d)


def test_ablation_switches_remove_tensors():
    cfg = network.ModelConfig(d_2d=6, d_3d=9, fused_dim=8, use_skip=False, use_cbam=False)
    params = network.init_params(cfg, 0)
    assert not any("skip" in k or "cbam" in k for k in params.tensors)
    e2d, e3d = _inputs(np.random.default_rng(0), cfg=cfg)
    r2d, r3d, cache = network.forward(params, e2d, e3d)
    assert set(network.backward(params, cache, r2d, r3d)) == set(params.tensors)


def test_checkpoint_round_trip(tmp_path):
    params = network.init_params(SMALL, 9)
    network.save_checkpoint(params, tmp_path / "ck")
    back = network.load_checkpoint(tmp_path / "ck")
    assert back.equals(params) and back.init_seed == 9
    assert back.config.to_dict() == params.config.to_dict()
    index = json.loads((tmp_path / "ck" / "index.json").read_text())
    assert index["format"] == "mafr-checkpoint" and len(index["tensors"]) == len(params.tensors)


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda d: (d / "tensor_000.mafr").write_bytes(b"garbage"),
        lambda d: (d / "tensor_001.mafr").unlink(),
        lambda d: (d / "index.json").write_text("{not json"),
        lambda d: (d / "index.json").write_text("[]"),
        lambda d: (d / "index.json").write_text(
            (d / "index.json").read_text().replace('"d_2d": 6', '"d_2d": 5')
        ),
    ],
)
def test_corrupt_checkpoint_is_a_format_error(tmp_path, corrupt):
    network.save_checkpoint(network.init_params(SMALL, 0), tmp_path / "ck")
    corrupt(tmp_path / "ck")
    with pytest.raises(FeatureFormatError):
        network.load_checkpoint(tmp_path / "ck")
