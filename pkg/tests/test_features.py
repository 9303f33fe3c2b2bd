import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mafr.features import (
    FeatureFormatError,
    FeatureMap,
    Modality,
    PointFeatureSet,
    densify,
    scatter_project,
    upsample_bilinear,
)

from . import oracles


def test_rejects_non_finite_and_bad_masks():
    with pytest.raises(FeatureFormatError):
        FeatureMap(np.array([[[np.nan]]]))
    with pytest.raises(FeatureFormatError):
        FeatureMap(np.zeros((2, 2, 1)), Modality.THREE_D, np.ones((3, 2), bool))
    with pytest.raises(FeatureFormatError):
        FeatureMap(np.zeros((2, 2, 1)), Modality.TWO_D, np.array([[True, False], [True, True]]))


def test_upsample_two_to_four_matches_scalar_lerp():
    fmap = FeatureMap(np.array([[[0.0]], [[2.0]]]))
    out = upsample_bilinear(fmap, 4, 1)
    expected = oracles.lerp_upsample_1d([0.0, 2.0], 4)
    np.testing.assert_allclose(expected, [0, 2 / 3, 4 / 3, 2], atol=1e-12)
    np.testing.assert_allclose(out.data[:, 0, 0], expected, atol=1e-6)


def test_upsample_matches_oracle_on_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h, w, d = rng.integers(1, 5, size=3)
        th, tw = h + rng.integers(0, 5), w + rng.integers(0, 5)
        data = rng.standard_normal((h, w, d)).astype(np.float32)
        out = upsample_bilinear(FeatureMap(data), th, tw)
        np.testing.assert_allclose(out.data, oracles.bilinear_upsample(data.astype(float), th, tw), atol=1e-5)


def test_upsample_identity_constant_and_corners():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((3, 4, 2)).astype(np.float32)
    same = upsample_bilinear(FeatureMap(data), 3, 4)
    assert same == FeatureMap(data)
    const = upsample_bilinear(FeatureMap(np.full((2, 3, 2), 1.5, np.float32)), 7, 9)
    assert np.all(const.data == np.float32(1.5))
    big = upsample_bilinear(FeatureMap(data), 9, 10)
    for (i, j), (a, b) in zip([(0, 0), (0, 3), (2, 0), (2, 3)], [(0, 0), (0, 9), (8, 0), (8, 9)]):
        np.testing.assert_array_equal(big.data[a, b], data[i, j])


def test_upsample_rejects_shrinking_and_invalid():
    fmap = FeatureMap(np.zeros((4, 4, 1), np.float32))
    with pytest.raises(ValueError):
        upsample_bilinear(fmap, 2, 4)
    holes = FeatureMap(np.zeros((2, 2, 1)), Modality.THREE_D, np.array([[1, 0], [1, 1]], bool))
    with pytest.raises(ValueError):
        upsample_bilinear(holes, 4, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31))
def test_upsample_stays_within_channel_range(h, w, dh, dw, seed):
    data = np.random.default_rng(seed).standard_normal((h, w, 2)).astype(np.float32)
    out = upsample_bilinear(FeatureMap(data), h + dh, w + dw)
    assert (out.data >= data.min(axis=(0, 1))).all() and (out.data <= data.max(axis=(0, 1))).all()


def test_scatter_project_averages_collisions_and_drops_outside():
    pts = PointFeatureSet(
        np.array([[1.0], [3.0], [5.0], [7.0]]),
        # (u=column, v=row)
        np.array([[0.2, 0.0], [-0.4, 0.49], [1.0, 1.0], [5.0, 0.0]]),
    )
    fmap, dropped = scatter_project(pts, 2, 2)
    assert dropped == 1
    assert fmap.modality is Modality.THREE_D
    np.testing.assert_array_equal(fmap.validity, [[True, False], [False, True]])
    assert fmap.data[0, 0, 0] == 2.0 and fmap.data[1, 1, 0] == 5.0
    assert fmap.data[0, 1, 0] == 0.0


def test_scatter_project_rounds_half_up():
    pts = PointFeatureSet(np.array([[1.0], [2.0]]), np.array([[0.5, 0.0], [0.0, 1.5]]))
    fmap, _ = scatter_project(pts, 3, 3)
    assert fmap.validity[0, 1] and fmap.validity[2, 0]


def test_densify_matches_bruteforce_nearest_with_row_major_ties():
    rng = np.random.default_rng(7)
    for _ in range(30):
        h, w = rng.integers(1, 7, size=2)
        data = rng.standard_normal((h, w, 3)).astype(np.float32)
        valid = rng.random((h, w)) < 0.4
        valid.flat[rng.integers(h * w)] = True
        data[~valid] = 0.0
        out = densify(FeatureMap(data, Modality.THREE_D, valid))
        np.testing.assert_array_equal(out.data, oracles.nearest_fill(data, valid))
        assert out.validity.all()
        np.testing.assert_array_equal(out.source_validity, valid)
        np.testing.assert_array_equal(out.data[valid], data[valid])


def test_densify_tie_prefers_earlier_pixel():
    data = np.zeros((1, 3, 1), np.float32)
    data[0, 0, 0], data[0, 2, 0] = 1.0, 2.0
    out = densify(FeatureMap(data, Modality.THREE_D, np.array([[True, False, True]])))
    assert out.data[0, 1, 0] == 1.0


def test_densify_needs_a_valid_pixel():
    with pytest.raises(ValueError):
        densify(FeatureMap(np.zeros((2, 2, 1)), Modality.THREE_D, np.zeros((2, 2), bool)))
