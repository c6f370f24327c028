"""Training objective with analytic gradients w.r.t. network outputs.

Total loss is ``L_d + lambda * L_r`` where the detection part sums two focal
heatmap losses and four L1 regression losses (offsets weighted by ``beta``),
and the recognition part is CTC.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .heatmap import DetectionMaps, DetectionTargets

EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    beta: float = 0.05

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    l_d: float
    l_r: Optional[float]
    center: float = 0.0
    wh: float = 0.0
    center_off: float = 0.0
    corner: float = 0.0
    corner_rel: float = 0.0
    corner_off: float = 0.0
    n_pos: int = 0
    n_plates: int = 0
    grads: dict = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "grads"}


def focal_center_loss(pred, target) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss on a heatmap and its gradient w.r.t. ``pred``.

    Positives are cells with target exactly 1; the sum is divided by their
    count when there is at least one. ``pred`` is clamped to [1e-6, 1-1e-6].
    """
    p_raw = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p_raw.shape != y.shape:
        raise ShapeError(f"pred {p_raw.shape} and target {y.shape} differ")
    p = np.clip(p_raw, EPS, 1 - EPS)
    inside = (p_raw >= EPS) & (p_raw <= 1 - EPS)
    pos = y == 1.0
    n_pos = int(pos.sum())
    neg_w = (1 - y) ** 4
    log_p, log_1p = np.log(p), np.log1p(-p)
    loss_pos = -(log_p * (1 - p) ** 2)[pos].sum()
    loss_neg = -(log_1p * p ** 2 * neg_w)[~pos].sum()
    g = np.where(pos,
                 -(1 - p) ** 2 / p + 2 * (1 - p) * log_p,
                 neg_w * (p ** 2 / (1 - p) - 2 * p * log_1p))
    g = np.where(inside, g, 0.0)
    norm = n_pos if n_pos > 0 else 1
    return float((loss_pos + loss_neg) / norm), g / norm


def l1_reg_loss(pred, target, mask, n: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Masked L1 loss ``sum |pred - target| / n`` and its subgradient.

    ``mask`` broadcasts against ``pred``; ``n`` defaults to the number of masked
    entries. The subgradient is 0 at exact ties.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} and target {t.shape} differ")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
    count = int(m.sum())
    if n is None:
        n = count
    if count == 0:
        if n >= 1:
            raise ShapeError("empty mask with n >= 1")
        return 0.0, np.zeros_like(p)
    if n < 1:
        raise ShapeError("n must be >= 1 when the mask is non-empty")
    diff = p - t
    loss = float(np.abs(diff[m]).sum() / n)
    return loss, np.where(m, np.sign(diff), 0.0) / n


def detection_loss(pred: DetectionMaps, targets: DetectionTargets,
                   weights: LossWeights = LossWeights()) -> LossReport:
    """Detection part of the objective, with per-map gradients in ``report.grads``.

    ``pred.center_heat`` and ``pred.corner_heat`` are post-sigmoid. L1 heads
    average over their masked entries (cells x channels).
    """
    if pred.shape != targets.shape:
        raise ShapeError(f"prediction maps {pred.shape} differ from targets {targets.shape}")
    grads = {}
    center, grads["center_heat"] = focal_center_loss(pred.center_heat, targets.center_heat)
    # corner heatmaps: one focal term over all four category channels
    corner, grads["corner_heat"] = focal_center_loss(pred.corner_heat, targets.corner_heat)
    cm, km = targets.center_mask[None], targets.corner_mask[None]
    wh, grads["wh"] = l1_reg_loss(pred.wh, targets.wh, cm)
    center_off, g = l1_reg_loss(pred.center_off, targets.center_off, cm)
    grads["center_off"] = weights.beta * g
    corner_rel, grads["corner_rel"] = l1_reg_loss(pred.corner_rel, targets.corner_rel, cm)
    corner_off, g = l1_reg_loss(pred.corner_off, targets.corner_off, km)
    grads["corner_off"] = weights.beta * g
    l_d = center + wh + weights.beta * center_off + corner + corner_rel + weights.beta * corner_off
    return LossReport(total=l_d, l_d=l_d, l_r=None, center=center, wh=wh, center_off=center_off,
                      corner=corner, corner_rel=corner_rel, corner_off=corner_off,
                      n_pos=targets.n_pos, grads=grads)


@dataclass
class CTCResult:
    loss: float
    grad: np.ndarray  # T x K, w.r.t. logits
    feasible: bool


def ctc_min_frames(label: Sequence[int]) -> int:
    """Frames needed to emit ``label``: one per token plus a blank between repeats."""
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def ctc_loss(values, label: Sequence[int], blank: Optional[int] = None, from_probs: bool = False) -> CTCResult:
    """Negative log-likelihood of ``label`` under a T x K table, via forward-backward.

    ``values`` are logits unless ``from_probs``; the gradient is always w.r.t.
    logits (for probabilities, w.r.t. their logs) and equals
    ``softmax - posterior occupancy``. Blank defaults to the last class.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"ctc_loss expects T x K, got {x.shape}")
    T, K = x.shape
    blank = K - 1 if blank is None else blank
    label = [int(k) for k in label]
    if any(k < 0 or k >= K or k == blank for k in label):
        raise ShapeError("label contains blank or out-of-range class ids")
    if from_probs:
        with np.errstate(divide="ignore"):
            logp = np.log(x)
    else:
        logp = _log_softmax(x)
    probs = np.exp(logp)
    if ctc_min_frames(label) > T:
        return CTCResult(math.inf, np.zeros_like(x), False)

    ext = [blank]
    for k in label:
        ext += [k, blank]
    S = len(ext)
    ext = np.array(ext)
    # s may come from s-2 when ext[s] is a label distinct from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # T x S

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b + emit[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_p):
        return CTCResult(math.inf, np.zeros_like(x), False)
    # alpha*beta double counts the emission at t
    log_occ = alpha + beta - emit - log_p
    occ = np.zeros((T, K))
    for s in range(S):
        occ[:, ext[s]] += np.exp(log_occ[:, s])
    return CTCResult(float(-log_p), probs - occ, True)


def ctc_loss_batch(out_values, labels: Sequence[Sequence[int]], blank: Optional[int] = None,
                   from_probs: bool = False) -> list[CTCResult]:
    """CTC per item of a T x B x K table."""
    v = np.asarray(out_values)
    if v.ndim != 3 or v.shape[1] != len(labels):
        raise ShapeError(f"expected T x {len(labels)} x K, got {v.shape}")
    return [ctc_loss(v[:, b, :], lab, blank, from_probs) for b, lab in enumerate(labels)]


def total_loss(detection: LossReport, recognition: Sequence[CTCResult | float],
               weights: LossWeights = LossWeights()) -> LossReport:
    """Combine detection and per-plate recognition losses.

    Recognition averages over feasible plates; with none the term is absent
    and the total equals the detection loss.
    """
    values = []
    for r in recognition:
        if isinstance(r, CTCResult):
            if r.feasible:
                values.append(r.loss)
        elif math.isfinite(r):
            values.append(float(r))
    l_r = float(np.mean(values)) if values else None
    total = detection.l_d + (weights.lam * l_r if l_r is not None else 0.0)
    report = LossReport(**{**detection.__dict__, "total": total, "l_r": l_r, "n_plates": len(recognition)})
    return report
