import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajbayes.metrics import (N_BINS, Region, confidence_bin, dice, ece, entropy_map, evaluate, foreground_bbox,
                               reliability_bins)
from trajbayes.segnet import ProbabilisticPrediction
from trajbayes.synthdata import CLASS_NAMES


def brute_force_ece(preds, gts, regions):
    """Per-voxel loop over plain Python floats."""
    bins = [[0, 0.0, 0.0] for _ in range(N_BINS)]
    for p, g, r in zip(preds, gts, regions):
        (y0, y1), (x0, x1) = r.bounds if r is not None else ((0, g.shape[0] - 1), (0, g.shape[1] - 1))
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                col = [float(v) for v in p.probs[:, y, x]]
                c = max(col)
                k = col.index(c)
                s = 1
                while not ((s - 1) / 100 < c <= s / 100) and s < N_BINS:
                    s += 1
                b = bins[s - 1]
                b[0] += 1
                b[1] += c
                b[2] += 1.0 if k == g[y, x] else 0.0
    total = sum(b[0] for b in bins)
    return 100 * sum(b[0] / total * abs(b[1] / b[0] - b[2] / b[0]) for b in bins if b[0])


def random_pred(rng, c=4, h=16, w=16, sharp=3.0):
    z = rng.standard_normal((c, h, w)) * sharp
    e = np.exp(z - z.max(axis=0))
    return ProbabilisticPrediction((e / e.sum(axis=0)).astype(np.float32))


@pytest.mark.parametrize("seed", range(10))
def test_ece_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    preds = [random_pred(rng) for _ in range(3)]
    gts = [rng.integers(0, 4, size=(16, 16)) for _ in range(3)]
    regions = [None, foreground_bbox(gts[1]), Region(((2, 9), (4, 15)))]
    got, _ = ece(preds, gts, regions)
    assert abs(got - brute_force_ece(preds, gts, regions)) < 1e-6


def test_uniform_entropy_is_two_bits():
    p = ProbabilisticPrediction(np.full((4, 3, 3), 0.25, dtype=np.float32))
    assert np.all(entropy_map(p).ent == 2.0)


def test_onehot_entropy_is_zero():
    p = ProbabilisticPrediction(np.eye(4, dtype=np.float32)[:, :, None].repeat(2, axis=2))
    assert np.all(entropy_map(p).ent == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_entropy_bounds(c, seed):
    p = random_pred(np.random.default_rng(seed), c=c, h=4, w=4)
    ent = entropy_map(p).ent
    assert np.all(ent >= 0) and np.all(ent <= math.log2(c) + 1e-6)


def test_dice_hand_cases():
    a = np.array([[1, 1], [0, 0]])
    assert dice(a, a, 1) == 1.0
    assert dice(a, np.array([[0, 0], [1, 1]]), 1) == 0.0
    assert dice(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]]), 1) == pytest.approx(2 / 3)
    assert dice(np.array([[1, 1, 0, 0]]), np.array([[1, 0, 1, 0]]), 1) == 0.5
    assert dice(a, a, 3) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:1], 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, size=(2, 6, 6))
    d = dice(a, b, 1)
    assert 0.0 <= d <= 1.0 and d == dice(b, a, 1)


def test_bin_edges_are_left_open():
    conf = np.array([0.0, 0.005, 0.01, 0.010001, 0.5, 0.99, 1.0])
    np.testing.assert_array_equal(confidence_bin(conf), [0, 0, 0, 1, 49, 98, 99])


def test_perfect_calibration_is_zero():
    conf = np.full(10, 0.7)
    correct = np.array([1] * 7 + [0] * 3, dtype=bool)
    bins = reliability_bins(conf, correct)
    assert bins.total == 10
    assert abs(bins.confidence[69] - bins.accuracy[69]) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_ece_order_invariant(seed):
    rng = np.random.default_rng(seed)
    preds = [random_pred(rng, h=6, w=6) for _ in range(3)]
    gts = [rng.integers(0, 4, size=(6, 6)) for _ in range(3)]
    e1, _ = ece(preds, gts)
    e2, _ = ece(preds[::-1], gts[::-1])
    assert e1 == e2
    assert 0.0 <= e1 <= 100.0


def test_foreground_bbox():
    g = np.zeros((5, 6), dtype=int)
    g[1, 2] = 3
    g[3, 4] = 1
    r = foreground_bbox(g)
    assert r.bounds == ((1, 3), (2, 4)) and r.size == 9
    with pytest.raises(ValueError):
        foreground_bbox(np.zeros((3, 3)))


def _onehot(gt):
    return ProbabilisticPrediction(np.eye(4, dtype=np.float32)[gt].transpose(2, 0, 1))


def test_evaluate_ground_truth_is_perfect():
    rng = np.random.default_rng(0)
    gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
    rep = evaluate("gt", "val_id", [_onehot(g) for g in gts], gts, CLASS_NAMES, keys=[3, 1, 2])
    assert rep.ece_percent == 0.0
    assert rep.dice_mean == {"RV": 1.0, "MYO": 1.0, "LV": 1.0}
    assert rep.mean_foreground_dice == 1.0


def test_evaluate_is_permutation_invariant():
    rng = np.random.default_rng(1)
    preds = [random_pred(rng, h=8, w=8) for _ in range(4)]
    gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(4)]
    keys = [10, 4, 7, 1]
    a = evaluate("m", "s", preds, gts, CLASS_NAMES, keys).to_dict()
    perm = [2, 0, 3, 1]
    b = evaluate("m", "s", [preds[i] for i in perm], [gts[i] for i in perm], CLASS_NAMES, [keys[i] for i in perm])
    assert a == b.to_dict()


def test_evaluate_excludes_empty_volumes():
    rng = np.random.default_rng(2)
    gts = [rng.integers(0, 4, size=(8, 8)), np.zeros((8, 8), dtype=int)]
    preds = [random_pred(rng, h=8, w=8) for _ in range(2)]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rep = evaluate("m", "s", preds, gts, CLASS_NAMES, keys=[5, 6])
    assert rep.excluded == [6] and len(rep.per_volume_ece) == 1
    assert any("no foreground" in str(x.message) for x in w)


def test_evaluate_rejects_mismatch():
    with pytest.raises(ValueError):
        evaluate("m", "s", [], [], CLASS_NAMES)
