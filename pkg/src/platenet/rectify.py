"""RoIAlign cropping and projective rectification of plate features."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateQuadError, PlatenetError
from .heatmap import STRIDE, Detection
from .tensor import as_tensor, bilinear_sample

log = logging.getLogger(__name__)

CROP_H, CROP_W = 32, 96


@dataclass
class PlateCrop:
    """Fixed-size feature crop plus the plate corners in crop coordinates.

    Crop coordinates index output samples, so the box edges land on the first
    and last sample centers: x1 -> 0, x2 -> CROP_W - 1 (same for y).
    """

    features: np.ndarray  # C x CROP_H x CROP_W
    box: tuple[float, float, float, float]
    corners: Optional[np.ndarray] = None  # 4 x 2 (x, y), LT RT LD RD


def roi_align(shared, box, corners=None, out_size: tuple[int, int] = (CROP_H, CROP_W),
              stride: int = STRIDE) -> PlateCrop:
    """Crop ``box`` (image pixels) from a C x H x W (or 1 x C x H x W) map.

    One bilinear sample per output cell, at the cell center.
    """
    fmap = as_tensor(shared)
    if fmap.ndim == 3:
        fmap = fmap[None]
    if fmap.ndim != 4 or fmap.shape[0] != 1:
        raise PlatenetError(f"roi_align expects a single feature map, got {fmap.shape}")
    oh, ow = out_size
    x1, y1, x2, y2 = (float(v) / stride for v in box)
    bw, bh = x2 - x1, y2 - y1
    if not (bw > 0 and bh > 0):
        raise PlatenetError(f"degenerate box {tuple(box)}")
    # continuous coords have cell i spanning [i, i+1); samples index the center grid at i
    xs = x1 + (np.arange(ow) + 0.5) * bw / ow - 0.5
    ys = y1 + (np.arange(oh) + 0.5) * bh / oh - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals = bilinear_sample(fmap, np.stack([gy.ravel(), gx.ravel()], axis=1))
    feats = vals[0].reshape(fmap.shape[1], oh, ow)
    crop_corners = None
    if corners is not None:
        c = np.asarray(corners, dtype=np.float64).reshape(4, 2) / stride
        crop_corners = np.stack([(c[:, 0] - x1) / bw * (ow - 1), (c[:, 1] - y1) / bh * (oh - 1)], axis=1)
    return PlateCrop(feats, tuple(float(v) for v in box), crop_corners)


def _collinear(p: np.ndarray, rel_tol: float = 1e-9) -> bool:
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1e-300)
    for i in range(4):
        a, b, c = (p[j] for j in range(4) if j != i)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= rel_tol * scale * scale:
            return True
    return False


def _normalizer(p: np.ndarray) -> np.ndarray:
    mean = p.mean(axis=0)
    s = np.sqrt(2.0) / max(np.sqrt(((p - mean) ** 2).sum(axis=1)).mean(), 1e-300)
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def _solve_partial_pivot(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    A = A.copy()
    b = b.copy()
    n = len(b)
    scale = np.abs(A).max()
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[piv, col]) <= 1e-12 * scale:
            raise DegenerateQuadError("singular homography system")
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        f = A[col + 1:, col] / A[col, col]
        A[col + 1:, col:] -= np.outer(f, A[col, col:])
        b[col + 1:] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - A[row, row + 1:] @ x[row + 1:]) / A[row, row]
    return x


def solve_homography(src, dst) -> np.ndarray:
    """3x3 projective map H with H @ (src, 1) ~ (dst, 1) and H[2, 2] = 1.

    Points are Hartley-normalized, the 8x8 system is solved by Gaussian
    elimination with partial pivoting in float64, then denormalized.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _collinear(src) or _collinear(dst):
        raise DegenerateQuadError("three of the four points are collinear")
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = (Ts @ np.c_[src, np.ones(4)].T).T[:, :2]
    d = (Td @ np.c_[dst, np.ones(4)].T).T[:, :2]
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i], rhs[2 * i + 1] = u, v
    Hn = np.append(_solve_partial_pivot(A, rhs), 1.0).reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-300:
        raise DegenerateQuadError("homography maps the origin to infinity")
    return H / H[2, 2]


def apply_homography(H, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    q = np.c_[p, np.ones(len(p))] @ np.asarray(H, dtype=np.float64).T
    return q[:, :2] / q[:, 2:3]


def rect_corners(h: int = CROP_H, w: int = CROP_W) -> np.ndarray:
    """Output-rectangle corners in LT, RT, LD, RD order."""
    return np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)


def warp_features(crop: PlateCrop) -> tuple[np.ndarray, bool]:
    """Inverse-warp the crop so the plate quad fills the whole output frame.

    Returns ``(features, ok)``; on a degenerate quad the crop is passed
    through unchanged with ``ok = False``.
    """
    feats = as_tensor(crop.features, ndim=3)
    if crop.corners is None:
        return feats.copy(), False
    _, h, w = feats.shape
    try:
        H = solve_homography(rect_corners(h, w), crop.corners)
    except DegenerateQuadError:
        log.warning("degenerate plate quad, passing crop through unrectified")
        return feats.copy(), False
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src = apply_homography(H, np.stack([gx.ravel(), gy.ravel()], axis=1))
    vals = bilinear_sample(feats[None], src[:, ::-1])
    return vals[0].reshape(feats.shape), True


def rectify_plate(shared, det: Detection, stride: int = STRIDE) -> np.ndarray:
    """RoIAlign then rectification for one detection; returns C x 32 x 96."""
    crop = roi_align(shared, det.box, det.corners, stride=stride)
    out, _ = warp_features(crop)
    return out


def rectify_batch(shared, detections: Sequence[Sequence[Detection]], stride: int = STRIDE) -> np.ndarray:
    """Stack crops for every detection of every image into B_r x C x 32 x 96.

    ``detections[b]`` lists the detections of image ``b`` of ``shared``.
    """
    fmap = as_tensor(shared, ndim=4)
    if len(detections) != fmap.shape[0]:
        raise PlatenetError(f"{len(detections)} detection lists for a batch of {fmap.shape[0]}")
    slices = [rectify_plate(fmap[b:b + 1], det, stride) for b, dets in enumerate(detections) for det in dets]
    if not slices:
        return np.zeros((0, fmap.shape[1], CROP_H, CROP_W), dtype=np.float32)
    return np.stack(slices)
