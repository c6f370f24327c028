"""Target encoding and NMS-free decoding for the six-branch detection head.

Maps are per image, channel-first (C x H/4 x W/4):

=============  ==  ====================================================
center_heat     1  plate-center Gaussian heatmap
wh              2  (w, h) of the box in feature units, at the center cell
center_off      2  (dx, dy) sub-cell residual of the center
corner_heat     4  one heatmap per corner category (LT, RT, LD, RD)
corner_rel      8  (corner - center) per category, at the center cell
corner_off      2  (dx, dy) sub-cell residual, at each corner cell
=============  ==  ====================================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import PlatenetError, ShapeError

STRIDE = 4
CORNER_NAMES = ("left_top", "right_top", "left_down", "right_down")
MAP_CHANNELS = {"center_heat": 1, "wh": 2, "center_off": 2, "corner_heat": 4, "corner_rel": 8, "corner_off": 2}
CENTER_RADIUS_FACTOR = 0.4
CORNER_RADIUS_FACTOR = 0.2


@dataclass(frozen=True)
class PlateAnnotation:
    box: tuple[float, float, float, float]
    corners: tuple[tuple[float, float], ...]  # LT, RT, LD, RD
    text: str = ""

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        corners = tuple((float(x), float(y)) for x, y in self.corners)
        if len(box) != 4 or len(corners) != 4:
            raise PlatenetError("a plate needs a 4-value box and 4 corners")
        if not (box[0] < box[2] and box[1] < box[3]):
            raise PlatenetError(f"degenerate plate box {box}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "corners", corners)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlateAnnotation":
        return cls(tuple(d["box"]), tuple(tuple(c) for c in d["corners"]), d.get("text", ""))

    def to_dict(self) -> dict:
        return {"box": list(self.box), "corners": [list(c) for c in self.corners], "text": self.text}

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return (x1 + x2) / 2, (y1 + y2) / 2


@dataclass
class DetectionMaps:
    center_heat: np.ndarray
    wh: np.ndarray
    center_off: np.ndarray
    corner_heat: np.ndarray
    corner_rel: np.ndarray
    corner_off: np.ndarray

    def __post_init__(self):
        hw = None
        for name, ch in MAP_CHANNELS.items():
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim == 4 and arr.shape[0] == 1:
                arr = arr[0]
            if arr.ndim != 3 or arr.shape[0] != ch:
                raise ShapeError(f"{name} must be {ch} x H x W, got {arr.shape}")
            if hw is None:
                hw = arr.shape[1:]
            elif arr.shape[1:] != hw:
                raise ShapeError(f"{name} spatial dims {arr.shape[1:]} differ from {hw}")
            setattr(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.center_heat.shape[1:]

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str = "") -> "DetectionMaps":
        try:
            return cls(**{name: tensors[prefix + name] for name in MAP_CHANNELS})
        except KeyError as exc:
            raise ShapeError(f"missing map {exc.args[0]}") from None

    def to_tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: getattr(self, name) for name in MAP_CHANNELS}


@dataclass
class DetectionTargets(DetectionMaps):
    center_mask: np.ndarray = None  # H x W bool, cells where box/corner_rel regressions apply
    corner_mask: np.ndarray = None  # H x W bool, cells where corner_off applies

    def __post_init__(self):
        super().__post_init__()
        for name in ("center_mask", "corner_mask"):
            m = getattr(self, name)
            m = np.zeros(self.shape, dtype=bool) if m is None else np.asarray(m).astype(bool)
            if m.shape != self.shape:
                raise ShapeError(f"{name} must be {self.shape}, got {m.shape}")
            setattr(self, name, m)

    @property
    def n_pos(self) -> int:
        return int(self.center_mask.sum())

    def to_tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = super().to_tensors(prefix)
        out[prefix + "center_mask"] = self.center_mask.astype(np.float32)
        out[prefix + "corner_mask"] = self.corner_mask.astype(np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str = "") -> "DetectionTargets":
        maps = DetectionMaps.from_tensors(tensors, prefix)
        return cls(**{name: getattr(maps, name) for name in MAP_CHANNELS},
                   center_mask=tensors.get(prefix + "center_mask", np.zeros(maps.shape)) > 0.5,
                   corner_mask=tensors.get(prefix + "corner_mask", np.zeros(maps.shape)) > 0.5)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    corners: Optional[list[tuple[float, float]]] = None
    corner_scores: Optional[list[float]] = None
    corner_source: Optional[list[str]] = None  # "peak" or "regressed"
    cell: Optional[tuple[int, int]] = field(default=None, repr=False)  # (y, x) of the center peak
    text: Optional[str] = None

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return (x1 + x2) / 2, (y1 + y2) / 2

    def to_dict(self) -> dict:
        d = {"box": [float(v) for v in self.box], "score": float(self.score)}
        if self.corners is not None:
            d["corners"] = [[float(x), float(y)] for x, y in self.corners]
            d["corner_scores"] = [float(s) for s in self.corner_scores]
            d["corner_source"] = list(self.corner_source)
        if self.text is not None:
            d["text"] = self.text
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        corners = d.get("corners")
        return cls(
            box=tuple(float(v) for v in d["box"]),
            score=float(d.get("score", 1.0)),
            corners=[tuple(map(float, c)) for c in corners] if corners is not None else None,
            corner_scores=list(d.get("corner_scores", [1.0] * 4)) if corners is not None else None,
            corner_source=list(d.get("corner_source", ["peak"] * 4)) if corners is not None else None,
            text=d.get("text"),
        )


@dataclass(frozen=True)
class CornerCandidate:
    x: float
    y: float
    score: float


def gaussian_splat(channel, center: tuple[float, float], radius: float) -> np.ndarray:
    """Max-merge a Gaussian with sigma = radius/3 centered at real ``(x, y)``.

    The integer pixel nearest the center is set to exactly 1.0. Returns a new
    array; the input is left untouched.
    """
    if not radius > 0:
        raise PlatenetError(f"radius must be positive, got {radius}")
    heat = np.array(channel, dtype=np.float32, copy=True)
    H, W = heat.shape
    xc, yc = float(center[0]), float(center[1])
    if not (0 <= xc < W and 0 <= yc < H):
        raise PlatenetError(f"splat center ({xc}, {yc}) outside {W}x{H} map")
    sigma = radius / 3.0
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    g = np.exp(-((xs - xc) ** 2 + (ys - yc) ** 2) / (2.0 * sigma * sigma))
    np.maximum(heat, g.astype(np.float32), out=heat)
    iy = min(int(math.floor(yc + 0.5)), H - 1)
    ix = min(int(math.floor(xc + 0.5)), W - 1)
    heat[iy, ix] = 1.0
    return heat


def _feature_cell(x: float, y: float, W: int, H: int) -> tuple[int, int]:
    return min(max(int(math.floor(x)), 0), W - 1), min(max(int(math.floor(y)), 0), H - 1)


def encode_targets(annotations: Sequence[PlateAnnotation], image_size: tuple[int, int],
                   stride: int = STRIDE) -> DetectionTargets:
    """Build the six training maps for one image of ``image_size = (width, height)``.

    Each Gaussian is centered on the integer cell holding the (stride-divided)
    point, and the sub-cell residual goes to the matching offset map.
    """
    width, height = image_size
    if width % stride or height % stride:
        raise ShapeError(f"image size {image_size} not divisible by stride {stride}")
    W, H = width // stride, height // stride
    maps = {name: np.zeros((ch, H, W), dtype=np.float32) for name, ch in MAP_CHANNELS.items()}
    center_mask = np.zeros((H, W), dtype=bool)
    corner_mask = np.zeros((H, W), dtype=bool)
    for ann in annotations:
        x1, y1, x2, y2 = (v / stride for v in ann.box)
        fw, fh = x2 - x1, y2 - y1
        if fw <= 0 or fh <= 0:
            raise PlatenetError(f"degenerate plate {ann.box}")
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        if not (0 <= cx < W and 0 <= cy < H):
            raise PlatenetError(f"plate center ({cx * stride}, {cy * stride}) outside the image")
        ix, iy = int(math.floor(cx)), int(math.floor(cy))
        maps["center_heat"][0] = gaussian_splat(maps["center_heat"][0], (ix, iy), CENTER_RADIUS_FACTOR * min(fw, fh))
        maps["wh"][:, iy, ix] = (fw, fh)
        maps["center_off"][:, iy, ix] = (cx - ix, cy - iy)
        center_mask[iy, ix] = True
        r_corner = CORNER_RADIUS_FACTOR * min(fw, fh)
        for k, (px, py) in enumerate(ann.corners):
            fx, fy = px / stride, py / stride
            maps["corner_rel"][2 * k:2 * k + 2, iy, ix] = (fx - cx, fy - cy)
            kx, ky = _feature_cell(fx, fy, W, H)
            maps["corner_heat"][k] = gaussian_splat(maps["corner_heat"][k], (kx, ky), r_corner)
            maps["corner_off"][:, ky, kx] = (fx - kx, fy - ky)
            corner_mask[ky, kx] = True
    return DetectionTargets(**maps, center_mask=center_mask, corner_mask=corner_mask)


def extract_peaks(heat, max_k: int = 8, threshold: float = 0.3) -> list[tuple[int, int, float]]:
    """3x3 local maxima of ``heat`` as ``(y, x, score)``, best first.

    On a tie with a neighbor only the raster-first pixel counts as a peak.
    Zero-valued cells are never peaks.
    """
    h = np.asarray(heat, dtype=np.float32)
    if h.ndim == 3 and h.shape[0] == 1:
        h = h[0]
    H, W = h.shape
    padded = np.full((H + 2, W + 2), -np.inf, dtype=np.float32)
    padded[1:-1, 1:-1] = h
    peak = np.ones((H, W), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            peak &= (h > nb) if earlier else (h >= nb)
    peak &= (h >= threshold) & (h > 0)
    ys, xs = np.nonzero(peak)  # raster order
    scores = h[ys, xs]
    order = np.lexsort((np.arange(len(ys)), -scores.astype(np.float64)))[:max_k]
    return [(int(ys[i]), int(xs[i]), float(scores[i])) for i in order]


def _clip(v: float, hi: float) -> float:
    return min(max(v, 0.0), hi)


def decode_boxes(maps: DetectionMaps, max_k: int = 8, threshold: float = 0.3,
                 image_size: Optional[tuple[int, int]] = None, stride: int = STRIDE) -> list[Detection]:
    H, W = maps.shape
    width, height = image_size if image_size is not None else (W * stride, H * stride)
    dets = []
    for y, x, score in extract_peaks(maps.center_heat[0], max_k, threshold):
        cx = x + float(maps.center_off[0, y, x])
        cy = y + float(maps.center_off[1, y, x])
        w, h = float(maps.wh[0, y, x]), float(maps.wh[1, y, x])
        box = ((cx - w / 2) * stride, (cy - h / 2) * stride, (cx + w / 2) * stride, (cy + h / 2) * stride)
        box = (_clip(box[0], width), _clip(box[1], height), _clip(box[2], width), _clip(box[3], height))
        dets.append(Detection(box=box, score=min(max(score, 0.0), 1.0), cell=(y, x)))
    return dets


def decode_corners(maps: DetectionMaps, max_k: int = 8, threshold: float = 0.3,
                   stride: int = STRIDE) -> list[list[CornerCandidate]]:
    """Per-category corner peaks, refined by the shared corner offset map, in image pixels."""
    out = []
    for k in range(4):
        cands = []
        for y, x, score in extract_peaks(maps.corner_heat[k], max_k, threshold):
            px = (x + float(maps.corner_off[0, y, x])) * stride
            py = (y + float(maps.corner_off[1, y, x])) * stride
            cands.append(CornerCandidate(px, py, score))
        out.append(cands)
    return out


def associate_corners(dets: Sequence[Detection], candidates: Sequence[Sequence[CornerCandidate]],
                      maps: Optional[DetectionMaps] = None, gate_factor: float = 1.5,
                      image_size: Optional[tuple[int, int]] = None, stride: int = STRIDE) -> list[Detection]:
    """Attach one corner per category to every box.

    Boxes are visited by descending score; each takes the unused candidate
    nearest its center if it lies within ``gate_factor * max(w, h) / 2``.
    Otherwise the corner is read from ``corner_rel`` at the box's center cell.
    """
    if image_size is None and maps is not None:
        image_size = (maps.shape[1] * stride, maps.shape[0] * stride)
    used = [set() for _ in range(4)]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    result: list[Optional[Detection]] = [None] * len(dets)
    for i in order:
        det = dets[i]
        cx, cy = det.center
        x1, y1, x2, y2 = det.box
        gate = gate_factor * max(x2 - x1, y2 - y1) / 2
        corners, scores, sources = [], [], []
        for k in range(4):
            best, best_d = None, math.inf
            for j, c in enumerate(candidates[k]):
                if j in used[k]:
                    continue
                d = math.hypot(c.x - cx, c.y - cy)
                if d <= gate and d < best_d:
                    best, best_d = j, d
            if best is not None:
                used[k].add(best)
                c = candidates[k][best]
                corners.append((c.x, c.y))
                scores.append(c.score)
                sources.append("peak")
            else:
                corners.append(_regressed_corner(det, k, maps, stride))
                scores.append(0.0)
                sources.append("regressed")
        if image_size is not None:
            corners = [(_clip(x, image_size[0]), _clip(y, image_size[1])) for x, y in corners]
        result[i] = replace(det, corners=corners, corner_scores=scores, corner_source=sources)
    return result


def _regressed_corner(det: Detection, k: int, maps: Optional[DetectionMaps], stride: int) -> tuple[float, float]:
    cx, cy = det.center
    if maps is None or det.cell is None:
        x1, y1, x2, y2 = det.box
        return ((x1, y1), (x2, y1), (x1, y2), (x2, y2))[k]
    y, x = det.cell
    # Center refined from the offset map, not the (possibly clipped) box.
    fx = x + float(maps.center_off[0, y, x])
    fy = y + float(maps.center_off[1, y, x])
    return ((fx + float(maps.corner_rel[2 * k, y, x])) * stride,
            (fy + float(maps.corner_rel[2 * k + 1, y, x])) * stride)


def decode(maps: DetectionMaps, max_k: int = 8, threshold: float = 0.3,
           image_size: Optional[tuple[int, int]] = None) -> list[Detection]:
    """Boxes, corners and their association in one call."""
    boxes = decode_boxes(maps, max_k, threshold, image_size)
    cands = decode_corners(maps, max_k, threshold)
    return associate_corners(boxes, cands, maps, image_size=image_size)
