"""End-to-end glue: oracle logits, per-image inference helpers and the self-test."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fixtures, plots, ptar
from .errors import PlatenetError
from .fusion import FusionWeights, load_backbone_features, shared_features
from .heatmap import Detection, DetectionMaps, decode, encode_targets
from .losses import LossWeights, ctc_loss, ctc_min_frames, detection_loss, total_loss
from .metrics import EvalConfig, eval_detection, eval_e2e, iou, match_ious
from .recognizer import (
    DEFAULT_TOKENS,
    Alphabet,
    HeadWeights,
    RecognitionOutput,
    RuleSet,
    apply_rules,
    beam_search_decode,
    head_forward,
)
from .rectify import rectify_batch, roi_align

log = logging.getLogger(__name__)


def oracle_logits(texts: Sequence[str], alphabet: Alphabet, T: int = 24, margin: float = 8.0) -> np.ndarray:
    """T x B x K logits whose greedy and beam decodes are ``texts``.

    Each token owns an equal slot of frames and the last frame of every slot
    is blank, so repeated tokens stay separable.
    """
    K = alphabet.num_classes
    out = np.zeros((T, len(texts), K), dtype=np.float32)
    out[:, :, alphabet.blank] = margin
    for b, text in enumerate(texts):
        ids = alphabet.encode(text)
        if not ids:
            continue
        slot = T // len(ids)
        if slot < 1 or (slot < 2 and ctc_min_frames(ids) > len(ids)):
            raise PlatenetError(f"{text!r} does not fit in {T} frames")
        for i, k in enumerate(ids):
            frames = range(i * slot, i * slot + max(1, slot - 1))
            for t in frames:
                out[t, b, :] = 0.0
                out[t, b, k] = margin
    return out


def maps_with_sigmoid_range(targets) -> DetectionMaps:
    """Ideal predicted maps for ``targets``: heat = 1 at positives, 0 elsewhere."""
    return DetectionMaps(
        center_heat=(targets.center_heat == 1.0).astype(np.float32),
        wh=targets.wh.copy(), center_off=targets.center_off.copy(),
        corner_heat=(targets.corner_heat == 1.0).astype(np.float32),
        corner_rel=targets.corner_rel.copy(), corner_off=targets.corner_off.copy(),
    )


def assign_texts(dets: Sequence[Detection], plates, threshold: float = 0.5) -> list[str]:
    """Ground-truth text of the best-IoU plate per detection ('' when none passes)."""
    texts = []
    for det in dets:
        best = max(plates, key=lambda p: iou(det.box, p.box), default=None)
        texts.append(best.text if best is not None and iou(det.box, best.box) > threshold else "")
    return texts


def recognize(out: RecognitionOutput, alphabet: Alphabet, rules: Optional[RuleSet] = None,
              beam_width: int = 10, n_best: int = 5) -> list[dict]:
    results = []
    for cands in beam_search_decode(out, alphabet, beam_width, n_best):
        text, verified = apply_rules(cands, rules, alphabet)
        results.append({
            "text": text, "verified": verified,
            "candidates": [{"text": c.text, "log_prob": round(c.log_prob, 9)} for c in cands],
        })
    return results


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def selftest(out_dir, seed: int = 0, count: int = 2, figures: bool = True) -> list[str]:
    """Deterministic smoke run of the full pipeline; returns the log lines.

    fixtures -> encode -> decode -> stand-in features -> rectify -> head shape
    check -> oracle logits -> beam search -> rules -> evaluation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []

    def emit(msg: str) -> None:
        lines.append(msg)
        log.info(msg)

    alphabet = Alphabet(DEFAULT_TOKENS)
    rules = RuleSet(frozenset({7}), {0: frozenset("ABCDEFGHJKLMNPQRSTUVWXYZ")})
    fusion_w = FusionWeights.random(seed)
    head_w = HeadWeights.random(seed + 1, alphabet.num_classes)
    weights = LossWeights()

    scenes = []
    for k, difficulty in enumerate(fixtures.DIFFICULTIES):
        scenes += fixtures.gen_fixtures(count, seed + k, difficulty)
    fixtures.write_fixtures(out / "fixtures", scenes)
    emit(f"fixtures\t{len(scenes)} scenes\tseed {seed}")

    preds, gts, target_tensors, crop_tensors, logit_tensors = {}, {}, {}, {}, {}
    for i, scene in enumerate(scenes):
        h, w = scene.image.shape
        targets = encode_targets(scene.annotations, (w, h))
        target_tensors.update(targets.to_tensors(f"{i}/"))
        pred_maps = maps_with_sigmoid_range(targets)
        dets = decode(pred_maps, max_k=8, threshold=0.3, image_size=(w, h))

        stages = load_backbone_features(seed, image=scene.image[None, None])
        shared = shared_features(stages, fusion_w)
        crops = rectify_batch(shared, [dets])
        crop_tensors[f"{i}/crops"] = crops
        head_out = head_forward(crops, head_w) if len(crops) else None
        if head_out is not None:
            sums = head_out.values.astype(np.float64).sum(axis=2)
            emit(f"head\tscene {i}\tshape {'x'.join(map(str, head_out.values.shape))}"
                 f"\tmax |sum-1| {np.abs(sums - 1).max():.2e}")

        texts = assign_texts(dets, scene.annotations)
        logits = oracle_logits(texts, alphabet)
        logit_tensors[f"{i}/logits"] = logits
        rec = recognize(RecognitionOutput(logits, is_prob=False), alphabet, rules)
        for det, r in zip(dets, rec):
            det.text = r["text"]

        det_report = detection_loss(pred_maps, targets, weights)
        ctc = [ctc_loss(logits[:, b, :], alphabet.encode(t)) for b, t in enumerate(texts)]
        report = total_loss(det_report, ctc, weights)
        emit(f"scene\t{i}\tdets {len(dets)}\ttext {'|'.join(d.text or '' for d in dets)}"
             f"\tL {report.total:.6f}\tL_d {report.l_d:.6f}\tL_r {report.l_r:.6f}")

        preds[i] = [d.to_dict() for d in dets]
        gts[i] = [a.to_dict() for a in scene.annotations]
        if figures:
            plots.plot_targets(scene.image, targets.center_heat, targets.corner_heat,
                               out / "figures" / f"targets_{i}.png",
                               boxes=[d.box for d in dets], corners=[d.corners for d in dets])
            if dets:
                raw = roi_align(shared, dets[0].box, dets[0].corners).features
                plots.plot_rectification(raw, crops[0], out / "figures" / f"rectified_{i}.png")

    ptar.write(out / "targets.ptar", target_tensors)
    ptar.write(out / "crops.ptar", crop_tensors)
    ptar.write(out / "logits.ptar", logit_tensors)
    (out / "detections.json").write_text(
        json.dumps({"images": [{"id": i, "plates": preds[i]} for i in preds]}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8")

    cfg = EvalConfig(iou_threshold=0.7, one_prediction_per_image=True)
    det_eval = eval_detection(preds, gts, cfg)
    e2e = eval_e2e(preds, gts, EvalConfig(0.7, True, True))
    emit(f"eval\tprecision {det_eval.precision:.6f}\te2e accuracy {e2e.accuracy:.6f}"
         f"\tn_pred {det_eval.n_pred}\tn_gt {det_eval.n_gt}")
    if figures:
        plots.plot_iou_histogram(match_ious(preds, gts, cfg), 0.7, out / "figures" / "iou.png")

    for name in ("targets.ptar", "crops.ptar", "logits.ptar", "detections.json",
                 "fixtures/images.ptar", "fixtures/annotations.json"):
        # round trip every archive bit-exactly before hashing
        if name.endswith(".ptar"):
            data = (out / name).read_bytes()
            if ptar.dumps(ptar.loads(data)) != data:
                raise PlatenetError(f"PTAR round trip of {name} is not bit-exact")
        emit(f"sha256\t{name}\t{_sha256(out / name)}")
    if figures:
        for fig in sorted((out / "figures").glob("*.png")):
            emit(f"sha256\tfigures/{fig.name}\t{_sha256(fig)}")
    (out / "selftest.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines
