import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mafr.metrics import aupro, auroc, pro_curve

from . import oracles


def test_auroc_worked_example():
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert oracles.auroc_pairs(scores, labels) == 0.75
    assert auroc(scores, labels) == 0.75


def test_auroc_definitions():
    assert auroc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    assert auroc([0.0, 0.0, 0.0, 0.0], [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 1, 1])


def test_auroc_matches_pair_counting():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, n) / 4.0 if rng.random() < 0.5 else rng.random(n)  # half the runs tie-heavy
        worst = max(worst, abs(auroc(scores, labels) - oracles.auroc_pairs(scores, labels)))
    assert worst <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auroc_symmetry_and_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 5, n).astype(float)
    a = auroc(scores, labels)
    assert a + auroc(scores, 1 - labels) == 1.0
    assert auroc(np.exp(scores) * 3 + 1, labels) == a


def test_aupro_worked_example():
    scores = np.array([[0.9, 0.1], [0.2, 0.8]])
    mask = np.array([[True, False], [False, True]])
    # diagonal pixels are two separate 4-connected regions
    assert len(oracles.bfs_regions(mask)) == 2
    assert oracles.aupro_sweep([scores], [mask], 0.3) == pytest.approx(1.0)
    assert aupro([scores], [mask], 0.3) == pytest.approx(1.0)


def test_aupro_matches_exhaustive_sweep():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        n_maps = int(rng.integers(1, 3))
        maps, masks = [], []
        for _ in range(n_maps):
            maps.append(np.round(rng.random((8, 8)), int(rng.integers(1, 4))))  # coarse values give ties
            masks.append(rng.random((8, 8)) < 0.25)
        masks[0][0, 0], masks[0][7, 7] = True, False
        for limit in (0.3, 0.01):
            worst = max(worst, abs(aupro(maps, masks, limit) - oracles.aupro_sweep(maps, masks, limit)))
    assert worst <= 1e-3


def test_perfect_localisation_is_one_at_any_limit():
    scores = np.zeros((6, 6))
    mask = np.zeros((6, 6), bool)
    mask[1:3, 1:4] = True
    mask[4, 4] = True
    scores[mask] = 1.0 + np.arange(mask.sum())
    for limit in (1.0, 0.3, 0.01):
        assert aupro([scores], [mask], limit) == pytest.approx(1.0)


def test_single_region_full_limit_is_region_roc_area():
    rng = np.random.default_rng(2)
    scores = rng.random((6, 6))
    mask = np.zeros((6, 6), bool)
    mask[2:4, 2:5] = True
    # one region: PRO equals TPR, so the full-range area is the pixel AUROC
    assert aupro([scores], [mask], 1.0) == pytest.approx(auroc(scores.ravel(), mask.ravel()), abs=1e-12)


def test_all_equal_scores_take_one_tie_step():
    mask = np.zeros((4, 4), bool)
    mask[0, :2] = True
    fpr, pro = pro_curve([np.full((4, 4), 0.5)], [mask])
    np.testing.assert_array_equal(fpr, [0.0, 1.0])
    np.testing.assert_allclose(pro, [0.0, 1.0], atol=1e-15)
    assert aupro([np.full((4, 4), 0.5)], [mask], 0.3) == pytest.approx(0.15)  # limit / 2


def test_aupro_errors():
    with pytest.raises(ValueError):
        aupro([np.zeros((2, 2))], [np.zeros((2, 2), bool)])
    with pytest.raises(ValueError):
        aupro([np.zeros((2, 2))], [np.ones((2, 2), bool)])
    with pytest.raises(ValueError):
        aupro([np.zeros((2, 2))], [np.eye(2, dtype=bool)], 0.0)
    with pytest.raises(ValueError):
        aupro([np.zeros((2, 2))], [np.zeros((3, 2), bool)])
