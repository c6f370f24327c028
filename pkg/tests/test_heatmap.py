import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platenet.errors import PlatenetError, ShapeError
from platenet.heatmap import (
    CornerCandidate,
    Detection,
    DetectionMaps,
    PlateAnnotation,
    associate_corners,
    decode,
    decode_boxes,
    decode_corners,
    encode_targets,
    extract_peaks,
    gaussian_splat,
)
from synth import random_plates


def brute_peaks(h, threshold):
    H, W = h.shape
    out = []
    for y in range(H):
        for x in range(W):
            v = h[y, x]
            if not (v >= threshold and v > 0):
                continue
            ok = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if (dy, dx) == (0, 0) or not (0 <= yy < H and 0 <= xx < W):
                        continue
                    raster_earlier = (yy, xx) < (y, x)
                    if (raster_earlier and h[yy, xx] >= v) or (not raster_earlier and h[yy, xx] > v):
                        ok = False
            if ok:
                out.append((y, x, float(v)))
    return sorted(out, key=lambda p: (-p[2], p[0], p[1]))


def empty_maps(H=32, W=64):
    return DetectionMaps(
        center_heat=np.zeros((1, H, W), np.float32), wh=np.zeros((2, H, W), np.float32),
        center_off=np.zeros((2, H, W), np.float32), corner_heat=np.zeros((4, H, W), np.float32),
        corner_rel=np.zeros((8, H, W), np.float32), corner_off=np.zeros((2, H, W), np.float32))


def test_splat_values():
    heat = gaussian_splat(np.zeros((40, 40)), (20, 20), 6.4)
    assert heat[20, 20] == 1.0
    sigma = 6.4 / 3
    assert heat[20, 22] == pytest.approx(math.exp(-4 / (2 * sigma ** 2)), rel=1e-6)
    assert heat[20, 22] == pytest.approx(0.6444, abs=5e-5)


def test_splat_forces_nearest_pixel_and_copies():
    base = np.zeros((10, 10), np.float32)
    heat = gaussian_splat(base, (3.4, 6.6), 2.0)
    assert heat[7, 3] == 1.0
    assert not base.any()
    with pytest.raises(PlatenetError):
        gaussian_splat(base, (3, 3), 0.0)


def test_overlapping_splats_max_merge():
    a = gaussian_splat(np.zeros((20, 20)), (8, 8), 6)
    b = gaussian_splat(np.zeros((20, 20)), (12, 9), 4)
    both = gaussian_splat(a, (12, 9), 4)
    np.testing.assert_array_equal(both, np.maximum(a, b))


def test_encode_center_example():
    ann = PlateAnnotation((81.2 - 32, 50.8 - 16, 81.2 + 32, 50.8 + 16), [(0, 0)] * 4)
    t = encode_targets([ann], (256, 128))
    assert t.center_heat[0, 12, 20] == 1.0
    np.testing.assert_allclose(t.center_off[:, 12, 20], [0.3, 0.7], atol=1e-5)
    np.testing.assert_allclose(t.wh[:, 12, 20], [16, 8], atol=1e-5)
    assert t.n_pos == 1


def test_encode_radii_for_square_plate():
    box = (64.0, 32.0, 128.0, 96.0)
    corners = [(64, 32), (128, 32), (64, 96), (128, 96)]
    t = encode_targets([PlateAnnotation(box, corners)], (256, 128))
    sig_c, sig_k = 6.4 / 3, 3.2 / 3
    assert t.center_heat[0, 16, 26] == pytest.approx(math.exp(-4 / (2 * sig_c ** 2)), rel=1e-6)
    assert t.corner_heat[0, 8, 18] == pytest.approx(math.exp(-4 / (2 * sig_k ** 2)), rel=1e-6)
    np.testing.assert_allclose(t.corner_rel[:, 16, 24], [-8, -8, 8, -8, -8, 8, 8, 8])


def test_encode_empty_and_bad_size():
    t = encode_targets([], (256, 128))
    assert t.n_pos == 0
    assert not any(np.any(a) for a in t.to_tensors().values())
    with pytest.raises(ShapeError):
        encode_targets([], (250, 128))


def test_single_splat_gives_one_peak():
    heat = gaussian_splat(np.zeros((32, 64)), (17, 9), 3.0)
    assert extract_peaks(heat) == [(9, 17, 1.0)]
    assert extract_peaks(np.zeros((8, 8))) == []


def test_two_close_splats_both_survive():
    heat = gaussian_splat(gaussian_splat(np.zeros((32, 64)), (10, 10), 6.0), (20, 10), 6.0)
    peaks = extract_peaks(heat)
    assert [(y, x) for y, x, _ in peaks] == [(10, 10), (10, 20)]


def test_plateau_keeps_raster_first():
    heat = np.zeros((5, 5), np.float32)
    heat[2, 2] = heat[2, 3] = 0.8
    assert extract_peaks(heat) == [(2, 2, pytest.approx(0.8))]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.0, 0.3, 0.5]))
def test_peaks_match_brute_force(seed, threshold):
    rng = np.random.default_rng(seed)
    h = (rng.integers(0, 5, size=(9, 11)) / 4).astype(np.float32)  # many ties
    expected = brute_peaks(h, threshold)[:8]
    assert extract_peaks(h, max_k=8, threshold=threshold) == expected


def test_decode_arithmetic_example():
    m = empty_maps()
    m.center_heat[0, 12, 20] = 0.9
    m.center_off[:, 12, 20] = (0.3, 0.7)
    m.wh[:, 12, 20] = (16, 8)
    (det,) = decode_boxes(m)
    np.testing.assert_allclose(det.center, (81.2, 50.8), atol=1e-4)
    np.testing.assert_allclose(det.box, (49.2, 34.8, 113.2, 66.8), atol=1e-4)
    assert det.score == pytest.approx(0.9)
    assert decode_boxes(empty_maps()) == []


def test_decode_clips_to_image():
    m = empty_maps()
    m.center_heat[0, 1, 1] = 1.0
    m.wh[:, 1, 1] = (20, 20)
    (det,) = decode_boxes(m, image_size=(256, 128))
    assert det.box[0] == 0.0 and det.box[1] == 0.0


def test_corner_decode_round_trip():
    (plate,) = random_plates(7, 1, 1)
    t = encode_targets([plate], (256, 128))
    cands = decode_corners(t)
    for k in range(4):
        assert len(cands[k]) == 1
        np.testing.assert_allclose((cands[k][0].x, cands[k][0].y), plate.corners[k], atol=1e-4)
    assert decode_corners(empty_maps()) == [[], [], [], []]


def test_two_plates_two_corner_peaks_each():
    plates = random_plates(11, 2, 2)
    cands = decode_corners(encode_targets(plates, (256, 128)))
    assert [len(c) for c in cands] == [2, 2, 2, 2]


def test_association_near_corners():
    det = Detection((40.0, 40.0, 104.0, 72.0), 0.9)
    near = [(41, 39), (103, 41), (40, 73), (105, 71)]
    cands = [[CornerCandidate(x, y, 0.8)] for x, y in near]
    (out,) = associate_corners([det], cands)
    assert out.corner_source == ["peak"] * 4
    assert out.corners == [tuple(map(float, c)) for c in near]


def test_association_fallback_uses_corner_rel():
    m = empty_maps()
    m.center_heat[0, 12, 20] = 1.0
    m.center_off[:, 12, 20] = (0.5, 0.5)
    m.wh[:, 12, 20] = (16, 8)
    m.corner_rel[:, 12, 20] = [-8, -4, 8, -4, -7, 4, 7, 4]
    (det,) = decode(m)
    assert det.corner_source == ["regressed"] * 4
    expected = [((20.5 + dx) * 4, (12.5 + dy) * 4) for dx, dy in [(-8, -4), (8, -4), (-7, 4), (7, 4)]]
    np.testing.assert_allclose(det.corners, expected)


def test_association_is_unique_across_boxes():
    a = Detection((0.0, 0.0, 40.0, 20.0), 0.9)
    b = Detection((10.0, 0.0, 50.0, 20.0), 0.8)
    cands = [[CornerCandidate(2, 1, 0.7), CornerCandidate(9, 1, 0.7)] for _ in range(4)]
    out = associate_corners([a, b], cands)
    for k in range(4):
        assert out[0].corners[k] != out[1].corners[k]
    assert out[0].corners[0] == (9.0, 1.0)  # the higher-scoring box chooses first


def test_candidate_outside_gate_is_ignored():
    det = Detection((0.0, 0.0, 40.0, 20.0), 0.9)
    far = [[CornerCandidate(200, 100, 0.9)] for _ in range(4)]
    (out,) = associate_corners([det], far)
    assert out.corner_source == ["regressed"] * 4


@pytest.mark.parametrize("seed", range(25))
def test_encode_decode_round_trip(seed):
    plates = random_plates(seed)
    dets = decode(encode_targets(plates, (256, 128)), image_size=(256, 128))
    assert len(dets) == len(plates)
    for p in plates:
        d = min(dets, key=lambda d: math.dist(d.center, p.center))
        np.testing.assert_allclose(d.box, p.box, atol=1e-4)
        np.testing.assert_allclose(d.corners, p.corners, atol=1e-4)
        assert d.corner_source == ["peak"] * 4


def test_maps_reject_bad_channels():
    m = empty_maps()
    with pytest.raises(ShapeError):
        DetectionMaps(m.center_heat, m.wh[:1], m.center_off, m.corner_heat, m.corner_rel, m.corner_off)


def test_detection_dict_round_trip():
    d = Detection((1.0, 2.0, 3.0, 4.0), 0.5, [(1.0, 2.0)] * 4, [0.5] * 4, ["peak"] * 4, text="AB1")
    assert Detection.from_dict(d.to_dict()).to_dict() == d.to_dict()
