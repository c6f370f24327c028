import numpy as np
import pytest

from platenet.errors import DegenerateQuadError
from platenet.fixtures import make_scene, render_plate
from platenet.heatmap import Detection
from platenet.rectify import (
    PlateCrop,
    apply_homography,
    rect_corners,
    rectify_batch,
    rectify_plate,
    roi_align,
    solve_homography,
    warp_features,
)
from platenet.tensor import bilinear_sample


def random_quad(rng, scale=50.0):
    base = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.float64) * scale
    return base + rng.uniform(-0.2, 0.2, size=(4, 2)) * scale + rng.uniform(-100, 100, size=2)


def checkerboard(h=32, w=96, cell=8):
    y, x = np.mgrid[0:h, 0:w]
    return (((y // cell) + (x // cell)) % 2).astype(np.float32)


def test_identity_homography():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = random_quad(rng)
        np.testing.assert_allclose(solve_homography(q, q), np.eye(3), atol=1e-12)


def test_axis_aligned_rect_is_scale_and_translate():
    src = [(10, 5), (58, 5), (10, 21), (58, 21)]
    H = solve_homography(src, rect_corners())
    assert H[0, 0] == pytest.approx(95 / 48, abs=1e-12)
    assert H[1, 1] == pytest.approx(31 / 16, abs=1e-12)
    assert abs(H[2, 0]) < 1e-12 and abs(H[2, 1]) < 1e-12
    assert abs(H[0, 1]) < 1e-12 and abs(H[1, 0]) < 1e-12
    np.testing.assert_allclose(apply_homography(H, src), rect_corners(), atol=1e-10)


def test_reprojection_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(100):
        src, dst = random_quad(rng), random_quad(rng, 30.0)
        H = solve_homography(src, dst)
        assert np.abs(apply_homography(H, src) - dst).max() < 1e-9


@pytest.mark.parametrize("quad", [
    [(0, 0), (1, 1), (2, 2), (5, 0)],
    [(0, 0), (0, 0), (3, 1), (1, 3)],
])
def test_degenerate_quads(quad):
    with pytest.raises(DegenerateQuadError):
        solve_homography(quad, rect_corners())


def test_roi_align_constant_and_aligned():
    const = np.full((3, 40, 120), 2.5, np.float32)
    crop = roi_align(const, (8.0, 8.0, 300.0, 100.0))
    assert crop.features.shape == (3, 32, 96)
    np.testing.assert_allclose(crop.features, 2.5)
    rng = np.random.default_rng(2)
    fmap = rng.normal(size=(4, 40, 120)).astype(np.float32)
    box = (5 * 4, 3 * 4, (5 + 96) * 4, (3 + 32) * 4)
    np.testing.assert_allclose(roi_align(fmap, box).features, fmap[:, 3:35, 5:101], atol=1e-6)


def test_roi_align_maps_box_corners_to_crop_corners():
    crop = roi_align(np.zeros((1, 30, 60)), (8, 8, 200, 100), corners=[(8, 8), (200, 8), (8, 100), (200, 100)])
    np.testing.assert_allclose(crop.corners, rect_corners())


def test_warp_with_own_corners_is_identity():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(5, 32, 96)).astype(np.float32)
    out, ok = warp_features(PlateCrop(feats, (0, 0, 1, 1), rect_corners()))
    assert ok
    np.testing.assert_allclose(out, feats, atol=1e-6)


def test_degenerate_quad_passes_through(caplog):
    feats = np.ones((2, 32, 96), np.float32)
    bad = np.array([[0, 0], [10, 10], [20, 20], [95, 31]], dtype=np.float64)
    out, ok = warp_features(PlateCrop(feats, (0, 0, 1, 1), bad))
    assert not ok
    np.testing.assert_array_equal(out, feats)
    assert "degenerate" in caplog.text


def test_checkerboard_warp_unwarp():
    board = checkerboard()
    quad = np.array([[4.0, 3.0], [90.0, 1.0], [1.0, 29.0], [94.0, 27.0]])
    H = solve_homography(rect_corners(), quad)
    # forward image: each crop pixel p shows the board at H^-1(p)
    gy, gx = np.mgrid[0:32, 0:96].astype(np.float64)
    back = apply_homography(np.linalg.inv(H), np.stack([gx.ravel(), gy.ravel()], axis=1))
    warped = bilinear_sample(board[None, None], back[:, ::-1])[0].reshape(1, 32, 96)
    out, ok = warp_features(PlateCrop(warped, (0, 0, 1, 1), quad))
    assert ok
    mae = np.abs(out[0, 2:-2, 2:-2] - board[2:-2, 2:-2]).mean()
    assert mae < 0.1


def column_lag(profile, reference, max_lag=6):
    a = profile - profile.mean()
    b = reference - reference.mean()
    lags = range(-max_lag, max_lag + 1)
    scores = [np.dot(np.roll(a, s), b) for s in lags]
    return list(lags)[int(np.argmax(scores))]


def plate_reference(text):
    plate = render_plate(text)
    ph, pw = plate.shape
    ys = (np.arange(32) * ph / 31.0) - 0.5
    xs = (np.arange(96) * pw / 95.0) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(plate[None, None].astype(np.float32),
                           np.stack([gy.ravel(), gx.ravel()], axis=1))[0, 0].reshape(32, 96)


@pytest.mark.parametrize("seed", [0, 10, 16, 21])
def test_rotated_fixture_columns_realigned(seed):
    scene = make_scene(seed, "rotated")
    (ann,) = scene.annotations
    det = Detection(ann.box, 1.0, list(ann.corners))
    image = scene.image[None].astype(np.float32)
    ink = 0.9 - rectify_plate(image, det, stride=1)[0]
    ref = plate_reference(ann.text)
    raw = 0.9 - roi_align(image, ann.box, stride=1).features[0]
    for rows in (slice(4, 16), slice(16, 28)):
        assert abs(column_lag(ink[rows].sum(axis=0), ref[rows].sum(axis=0))) <= 1
    # these seeds rotate by 30+ degrees, so the unrectified crop is visibly sheared
    lags = [column_lag(raw[r].sum(axis=0), ref[r].sum(axis=0)) for r in (slice(4, 16), slice(16, 28))]
    assert max(abs(v) for v in lags) > 1


def test_axis_aligned_detection_equals_roi_align():
    rng = np.random.default_rng(4)
    fmap = rng.normal(size=(1, 8, 32, 64)).astype(np.float32)
    box = (13.0, 21.0, 171.0, 77.0)
    corners = [(13.0, 21.0), (171.0, 21.0), (13.0, 77.0), (171.0, 77.0)]
    out = rectify_plate(fmap, Detection(box, 1.0, corners))
    np.testing.assert_allclose(out, roi_align(fmap, box).features, atol=1e-5)


def test_batch_stacking_and_fallback():
    fmap = np.random.default_rng(5).normal(size=(1, 128, 32, 64)).astype(np.float32)
    dets = [Detection((10.0 * i, 10.0, 10.0 * i + 80, 50.0), 0.9,
                      [(10.0 * i, 12.0), (10.0 * i + 78, 10.0), (10.0 * i + 2, 50.0), (10.0 * i + 80, 48.0)],
                      [0.0] * 4, ["regressed"] * 4) for i in range(3)]
    out = rectify_batch(fmap, [dets])
    assert out.shape == (3, 128, 32, 96)
    assert rectify_batch(fmap, [[]]).shape == (0, 128, 32, 96)
