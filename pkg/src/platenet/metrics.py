"""Letterbox resizing, IoU and the detection / end-to-end evaluation protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .heatmap import STRIDE

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize anchored top-left, zero padding right/bottom."""

    scale: float
    content: tuple[int, int]  # (w, h) of the resized image
    pad_right: int
    pad_bottom: int

    def forward(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale, y * self.scale

    def inverse(self, x: float, y: float) -> tuple[float, float]:
        return x / self.scale, y / self.scale

    def inverse_box(self, box) -> tuple[float, float, float, float]:
        x1, y1 = self.inverse(box[0], box[1])
        x2, y2 = self.inverse(box[2], box[3])
        return x1, y1, x2, y2


def letterbox(dims_in: tuple[int, int], dims_out: tuple[int, int]) -> Letterbox:
    w_in, h_in = dims_in
    w_out, h_out = dims_out
    if min(w_in, h_in, w_out, h_out) <= 0:
        raise ValueError("letterbox dimensions must be positive")
    scale = min(w_out / w_in, h_out / h_in)
    cw = min(int(round(w_in * scale)), w_out)
    ch = min(int(round(h_in * scale)), h_out)
    return Letterbox(scale, (cw, ch), w_out - cw, h_out - ch)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if not (ax2 > ax1 and ay2 > ay1 and bx2 > bx1 and by2 > by1):
        log.warning("degenerate rectangle in iou: %s vs %s", a, b)
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    one_prediction_per_image: bool = False
    e2e: bool = False

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"IoU threshold must be in (0, 1), got {self.iou_threshold}")


@dataclass
class DetectionEval:
    precision: float
    recall: Optional[float]
    n_pred: int
    n_gt: int
    n_correct: int
    undefined: bool = False  # no predictions at all; precision reported as 0


@dataclass
class E2EEval:
    accuracy: float
    n_images: int
    n_correct_images: int
    n_correct_plates: int


def _pred_key(p: Mapping):
    """Score descending; ties go to the raster-first peak cell, then box and text."""
    box = tuple(float(v) for v in p["box"])
    cell = (math.floor((box[1] + box[3]) / 2 / STRIDE), math.floor((box[0] + box[2]) / 2 / STRIDE))
    return (-float(p.get("score", 1.0)), cell, box, p.get("text") or "")


def _prepare(preds: Sequence[Mapping], cfg: EvalConfig) -> list[Mapping]:
    ordered = sorted(preds, key=_pred_key)
    return ordered[:1] if cfg.one_prediction_per_image else ordered


def _match(preds: Sequence[Mapping], gts: Sequence[Mapping], thr: float, need_text: bool) -> list:
    """Greedy matching by score; each prediction takes the best-IoU unmatched GT above ``thr``.

    Returns ``(pred, gt, correct)`` per prediction.
    """
    gt_order = sorted(range(len(gts)), key=lambda j: tuple(float(v) for v in gts[j]["box"]))
    used = set()
    out = []
    for p in preds:
        best, best_iou = None, thr
        for j in gt_order:
            if j in used:
                continue
            v = iou(p["box"], gts[j]["box"])
            if v > best_iou:
                best, best_iou = j, v
        if best is None:
            out.append((p, None, False))
            continue
        used.add(best)
        ok = (p.get("text") == gts[best].get("text")) if need_text else True
        out.append((p, gts[best], ok))
    return out


def eval_detection(preds: Mapping, gts: Mapping, cfg: EvalConfig = EvalConfig()) -> DetectionEval:
    """Precision (and recall unless one-per-image) over images.

    ``preds`` and ``gts`` map image id to lists of ``{"box", "score"?, "text"?}``.
    A prediction is correct iff its IoU with an unmatched ground truth exceeds
    the threshold.
    """
    n_pred = n_gt = n_correct = 0
    for image_id in sorted(set(preds) | set(gts), key=str):
        ps = _prepare(preds.get(image_id, []), cfg)
        gs = list(gts.get(image_id, []))
        n_pred += len(ps)
        n_gt += len(gs)
        n_correct += sum(1 for _, g, _ok in _match(ps, gs, cfg.iou_threshold, False) if g is not None)
    recall = None if cfg.one_prediction_per_image else (n_correct / n_gt if n_gt else 0.0)
    if n_pred == 0:
        return DetectionEval(0.0, recall, 0, n_gt, 0, undefined=True)
    return DetectionEval(n_correct / n_pred, recall, n_pred, n_gt, n_correct)


def eval_e2e(preds: Mapping, gts: Mapping, cfg: EvalConfig = EvalConfig(e2e=True)) -> E2EEval:
    """Image-level end-to-end accuracy.

    An image is correct when every ground-truth plate is matched (IoU above
    threshold and identical text) and no prediction is left unmatched.
    """
    ids = sorted(set(preds) | set(gts), key=str)
    correct_images = correct_plates = 0
    for image_id in ids:
        ps = _prepare(preds.get(image_id, []), cfg)
        gs = list(gts.get(image_id, []))
        matches = _match(ps, gs, cfg.iou_threshold, True)
        hits = sum(1 for _, g, ok in matches if g is not None and ok)
        correct_plates += hits
        if hits == len(gs) == len(ps):
            correct_images += 1
    n = len(ids)
    return E2EEval(correct_images / n if n else 0.0, n, correct_images, correct_plates)


def match_ious(preds: Mapping, gts: Mapping, cfg: EvalConfig = EvalConfig()) -> list[float]:
    """Best IoU of every kept prediction against its image's ground truth (for reports)."""
    out = []
    for image_id in sorted(set(preds) | set(gts), key=str):
        gs = gts.get(image_id, [])
        for p in _prepare(preds.get(image_id, []), cfg):
            out.append(max((iou(p["box"], g["box"]) for g in gs), default=0.0))
    return out
