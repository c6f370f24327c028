import math

import numpy as np
import pytest

from oracles import central_diff, labeling_probs, path_sum, rel_error, softmax
from platenet.errors import ShapeError
from platenet.heatmap import encode_targets
from platenet.losses import (
    CTCResult,
    LossWeights,
    ctc_loss,
    ctc_loss_batch,
    ctc_min_frames,
    detection_loss,
    focal_center_loss,
    l1_reg_loss,
    total_loss,
)
from platenet.pipeline import maps_with_sigmoid_range
from synth import random_plates


def test_focal_perfect_prediction():
    target = np.zeros((8, 8))
    target[3, 4] = 1.0
    pred = np.full((8, 8), 1e-6)
    pred[3, 4] = 1 - 1e-6
    loss, _ = focal_center_loss(pred, target)
    assert loss < 1e-4


def test_focal_half_positive():
    target = np.zeros((8, 8))
    target[3, 4] = 1.0
    pred = np.full((8, 8), 1e-6)
    pred[3, 4] = 0.5
    loss, _ = focal_center_loss(pred, target)
    assert loss == pytest.approx(-math.log(0.5) * 0.25, abs=1e-9)
    assert loss == pytest.approx(0.1733, abs=1e-4)


def test_focal_without_positives_is_negative_branch():
    rng = np.random.default_rng(0)
    target = rng.uniform(0, 0.9, size=(6, 6))
    pred = rng.uniform(0.01, 0.99, size=(6, 6))
    expected = -(np.log(1 - pred) * pred ** 2 * (1 - target) ** 4).sum()
    assert focal_center_loss(pred, target)[0] == pytest.approx(expected, rel=1e-12)


def test_focal_shape_mismatch():
    with pytest.raises(ShapeError):
        focal_center_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_l1_examples():
    assert l1_reg_loss([1.0, 6.0], [2.0, 4.0], [True, True], n=2)[0] == 1.5
    loss, grad = l1_reg_loss([3.0, 5.0], [3.0, 4.0], [True, True])
    assert loss == 0.5
    np.testing.assert_array_equal(grad, [0.0, 0.5])
    assert l1_reg_loss([1.0], [1.0], [True])[0] == 0.0
    assert l1_reg_loss([1.0], [9.0], [False], n=0) == (0.0, pytest.approx(np.zeros(1)))
    with pytest.raises(ShapeError):
        l1_reg_loss([1.0], [9.0], [False], n=1)


def single_plate_targets():
    (plate,) = random_plates(1, 1, 1)
    return encode_targets([plate], (256, 128))


def test_detection_perfect_prediction():
    t = single_plate_targets()
    assert detection_loss(clamped_ideal(t), t).l_d < 1e-3
    assert t.center_mask.sum() == 1


def clamped_ideal(t):
    pred = maps_with_sigmoid_range(t)
    pred.center_heat = np.clip(pred.center_heat, 1e-6, 1 - 1e-6)
    pred.corner_heat = np.clip(pred.corner_heat, 1e-6, 1 - 1e-6)
    return pred


@pytest.mark.parametrize("head,mask", [("center_off", "center_mask"), ("corner_off", "corner_mask")])
def test_detection_offset_error_costs_beta(head, mask):
    t = single_plate_targets()
    pred = clamped_ideal(t)
    ref = detection_loss(pred, t).l_d
    m = getattr(t, mask)
    # both channels off by exactly 1.0 on every masked cell of this head
    getattr(pred, head)[:, m] = getattr(t, head)[:, m] + 1.0
    assert detection_loss(pred, t).l_d - ref == pytest.approx(0.05, abs=1e-6)
    zero_beta = LossWeights(beta=0.0)
    assert detection_loss(pred, t, zero_beta).l_d == pytest.approx(detection_loss(clamped_ideal(t), t, zero_beta).l_d)


def test_ctc_examples():
    assert ctc_loss(np.array([[0.7, 0.3]]), [0], from_probs=True).loss == pytest.approx(-math.log(0.7))
    r = ctc_loss(np.full((2, 3), 1 / 3), [0], from_probs=True)
    assert r.loss == pytest.approx(math.log(3), abs=1e-12)
    bad = ctc_loss(np.full((2, 3), 1 / 3), [0, 0], from_probs=True)
    assert bad.loss == math.inf and not bad.feasible and not bad.grad.any()
    assert ctc_min_frames([0, 0, 1, 1]) == 6
    assert ctc_loss(np.zeros((3, 3)), []).loss == pytest.approx(-3 * math.log(1 / 3))


@pytest.mark.parametrize("seed", range(15))
def test_ctc_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    T, K = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    p = rng.dirichlet(np.ones(K), size=T)
    for label, prob in labeling_probs(p, K - 1).items():
        assert ctc_loss(p, label, from_probs=True).loss == pytest.approx(-math.log(prob), rel=1e-10, abs=1e-12)


def test_labeling_mass_at_most_one():
    rng = np.random.default_rng(9)
    p = rng.dirichlet(np.ones(3), size=4)
    labels = {lab for lab in labeling_probs(p, 2)}
    total = sum(math.exp(-ctc_loss(p, lab, from_probs=True).loss) for lab in labels)
    assert total <= 1 + 1e-9
    assert path_sum(p, (0, 0, 0), 2) == 0.0


def test_ctc_batch_shape():
    vals = np.zeros((6, 2, 4))
    out = ctc_loss_batch(vals, [[0], [1, 2]])
    assert [r.feasible for r in out] == [True, True]
    with pytest.raises(ShapeError):
        ctc_loss_batch(vals, [[0]])


@pytest.mark.parametrize("seed", range(5))
def test_focal_gradient(seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0, 0.99, size=(5, 6))
    target[rng.integers(5), rng.integers(6)] = 1.0
    pred = rng.uniform(0.02, 0.98, size=(5, 6))
    _, g = focal_center_loss(pred, target)
    assert rel_error(g, central_diff(lambda p: focal_center_loss(p, target)[0], pred.copy())) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_l1_gradient(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(3, 4))
    pred = target + rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, size=(3, 4))
    mask = rng.random((3, 4)) < 0.6
    mask[0, 0] = True
    _, g = l1_reg_loss(pred, target, mask)
    assert rel_error(g, central_diff(lambda p: l1_reg_loss(p, target, mask)[0], pred.copy())) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_ctc_gradient(seed):
    rng = np.random.default_rng(seed)
    T, K = int(rng.integers(3, 9)), int(rng.integers(3, 7))
    logits = rng.normal(size=(T, K))
    label = list(rng.integers(0, K - 1, size=int(rng.integers(1, T // 2 + 1))))
    r = ctc_loss(logits, label)
    assert r.feasible
    assert rel_error(r.grad, central_diff(lambda x: ctc_loss(x, label).loss, logits.copy())) < 1e-6
    np.testing.assert_allclose(r.grad.sum(axis=1), 0.0, atol=1e-12)
    assert np.allclose(softmax(logits) - r.grad >= -1e-12, True)


def test_total_loss_examples():
    det = detection_loss(maps_with_sigmoid_range(single_plate_targets()), single_plate_targets())
    det.l_d = 1.0
    assert total_loss(det, [0.5]).total == pytest.approx(6.0)
    assert total_loss(det, [0.5], LossWeights(lam=0.0)).total == pytest.approx(1.0)
    empty = total_loss(det, [])
    assert empty.total == 1.0 and empty.l_r is None
    inf = CTCResult(math.inf, np.zeros((2, 2)), False)
    mixed = total_loss(det, [inf, 0.25, 0.75])
    assert mixed.l_r == pytest.approx(0.5) and mixed.total == pytest.approx(6.0)
    assert total_loss(det, [inf]).total == 1.0
