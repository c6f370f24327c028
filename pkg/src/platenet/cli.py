"""Command-line entry point: ``platenet <subcommand> ...``.

Exit status is 0 on success and 2 on any validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import fixtures, plots, ptar
from .errors import PlatenetError
from .fusion import STAGES, FusionWeights, shared_features
from .heatmap import Detection, DetectionMaps, decode, encode_targets
from .losses import ctc_loss
from .metrics import EvalConfig, eval_detection, eval_e2e, match_ious
from .pipeline import recognize, selftest
from .recognizer import DEFAULT_TOKENS, Alphabet, HeadWeights, RecognitionOutput, RuleSet, head_forward
from .rectify import rectify_batch

log = logging.getLogger("platenet")


def _write_json(path, data) -> None:
    text = json.dumps(data, indent=1, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _group_by_prefix(tensors: dict, suffix: str) -> dict[str, str]:
    """Map image id -> tensor prefix for every ``<prefix><suffix>`` name."""
    groups = {}
    for name in tensors:
        if name.endswith(suffix):
            prefix = name[: -len(suffix)]
            groups[prefix.rstrip("/") or "0"] = prefix
    return groups


def _sort_ids(ids):
    return sorted(ids, key=lambda s: (0, int(s)) if re.fullmatch(r"-?\d+", str(s)) else (1, str(s)))


def cmd_gen_fixtures(args) -> int:
    scenes = fixtures.gen_fixtures(args.count, args.seed, args.difficulty)
    fixtures.write_fixtures(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_encode_targets(args) -> int:
    out = {}
    for img in fixtures.load_annotations(args.ann):
        targets = encode_targets(img["plates"], (img["width"], img["height"]))
        out.update(targets.to_tensors(f"{img['id']}/"))
    ptar.write(args.out, out)
    print(f"wrote {len(out)} tensors to {args.out}")
    return 0


def cmd_decode(args) -> int:
    tensors = ptar.read(args.maps)
    groups = _group_by_prefix(tensors, "center_heat")
    if not groups:
        raise PlatenetError("no center_heat map in archive")
    images = []
    for image_id in _sort_ids(groups):
        maps = DetectionMaps.from_tensors(tensors, groups[image_id])
        H, W = maps.shape
        dets = decode(maps, args.topk, args.threshold)
        images.append({"id": int(image_id) if image_id.lstrip("-").isdigit() else image_id,
                       "width": W * 4, "height": H * 4, "plates": [d.to_dict() for d in dets]})
    _write_json(args.out, {"images": images})
    return 0


def _load_detections(path) -> list[tuple[object, list[Detection]]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(img["id"], [Detection.from_dict(p) for p in img.get("plates", [])]) for img in data["images"]]


def _shared_for(tensors: dict, image_id, fusion: FusionWeights | None) -> np.ndarray:
    for name in (f"{image_id}/shared", "shared"):
        if name in tensors:
            return tensors[name]
    stage_names = [f"{image_id}/{s}" for s in STAGES]
    if all(n in tensors for n in stage_names):
        stages = {s: tensors[n] for s, n in zip(STAGES, stage_names)}
    elif all(s in tensors for s in STAGES):
        stages = {s: tensors[s] for s in STAGES}
    else:
        raise PlatenetError(f"no shared features or backbone stages for image {image_id}")
    if fusion is None:
        raise PlatenetError("backbone stages given without fusion weights (--fusion-weights)")
    return shared_features(stages, fusion)


def cmd_rectify(args) -> int:
    tensors = ptar.read(args.features)
    fusion = None
    if args.fusion_weights:
        fusion = FusionWeights.from_tensors(ptar.read(args.fusion_weights))
    elif any(n.endswith("reduce2.weight") for n in tensors):
        fusion = FusionWeights.from_tensors(tensors)
    crops = []
    for image_id, dets in _load_detections(args.det):
        if not dets:
            continue
        shared = np.asarray(_shared_for(tensors, image_id, fusion))
        if shared.ndim == 3:
            shared = shared[None]
        crops.append(rectify_batch(shared, [dets]))
    if crops:
        stacked = np.concatenate(crops)
    else:
        stacked = np.zeros((0, 128, 32, 96), dtype=np.float32)
    ptar.write(args.out, {"crops": stacked})
    print(f"wrote {stacked.shape[0]} crops to {args.out}")
    return 0


def cmd_recognize(args) -> int:
    alphabet = Alphabet.from_json(args.alphabet)
    rules = RuleSet.from_json(args.rules) if args.rules else None
    if args.logits:
        values = _single_tensor(ptar.read(args.logits), "logits")
        out = RecognitionOutput(values, is_prob=args.probs)
    else:
        if not args.weights:
            raise PlatenetError("--crops requires --weights")
        crops = _single_tensor(ptar.read(args.crops), "crops")
        out = head_forward(crops, HeadWeights.from_tensors(ptar.read(args.weights)))
    if out.values.shape[2] != alphabet.num_classes:
        raise PlatenetError(f"{out.values.shape[2]} classes in output, alphabet has {alphabet.num_classes}")
    results = recognize(out, alphabet, rules, args.beam_width, args.n_best)
    if args.det:
        data = json.loads(Path(args.det).read_text(encoding="utf-8"))
        plates = [p for img in data["images"] for p in img.get("plates", [])]
        if len(plates) != len(results):
            raise PlatenetError(f"{len(plates)} detections but {len(results)} recognition outputs")
        for p, r in zip(plates, results):
            p["text"] = r["text"]
            p["verified"] = r["verified"]
        _write_json(args.out, data)
    else:
        _write_json(args.out, {"results": results})
    return 0


def _single_tensor(tensors: dict, preferred: str) -> np.ndarray:
    if preferred in tensors:
        return tensors[preferred]
    if len(tensors) == 1:
        return next(iter(tensors.values()))
    raise PlatenetError(f"archive needs a tensor named {preferred!r}")


def cmd_ctc_loss(args) -> int:
    alphabet = Alphabet.from_json(args.alphabet) if args.alphabet else Alphabet(DEFAULT_TOKENS)
    values = _single_tensor(ptar.read(args.logits), "logits")
    if values.ndim == 3:
        if values.shape[1] != 1:
            raise PlatenetError(f"ctc-loss takes one item, got batch {values.shape[1]}")
        values = values[:, 0, :]
    if values.ndim != 2 or values.shape[1] != alphabet.num_classes:
        raise PlatenetError(f"logits must be T x {alphabet.num_classes}, got {values.shape}")
    result = ctc_loss(values, alphabet.encode(args.labels), blank=alphabet.blank)
    if args.grad:
        ptar.write(args.grad, {"grad": result.grad.astype(np.float32)})
    loss = result.loss if math.isfinite(result.loss) else "inf"
    _write_json(None, {"loss": loss, "feasible": result.feasible, "T": values.shape[0]})
    return 0


def _load_boxes(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(img["id"]): list(img.get("plates", [])) for img in data["images"]}


def cmd_eval(args) -> int:
    preds, gts = _load_boxes(args.pred), _load_boxes(args.gt)
    cfg = EvalConfig(args.iou, args.one_per_image, args.e2e)
    det = eval_detection(preds, gts, cfg)
    rows = [("iou_threshold", f"{args.iou:g}"), ("n_pred", det.n_pred), ("n_gt", det.n_gt),
            ("n_correct", det.n_correct), ("precision", f"{det.precision:.6f}")]
    if det.undefined:
        rows.append(("precision_undefined", "true"))
    if det.recall is not None:
        rows.append(("recall", f"{det.recall:.6f}"))
    if args.e2e:
        e2e = eval_e2e(preds, gts, cfg)
        rows += [("e2e_images", e2e.n_images), ("e2e_correct_images", e2e.n_correct_images),
                 ("e2e_accuracy", f"{e2e.accuracy:.6f}")]
    text = "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows)
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    if args.figures:
        path = plots.plot_iou_histogram(match_ious(preds, gts, cfg), args.iou, Path(args.figures) / "iou.png")
        log.info("wrote %s", path)
    return 0


def cmd_selftest(args) -> int:
    for line in selftest(args.out, seed=args.seed, count=args.count, figures=not args.no_figures):
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="platenet", description="License plate detection/recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-fixtures", help="render seeded synthetic plate scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--difficulty", choices=fixtures.DIFFICULTIES, default="axis-aligned")
    s.set_defaults(func=cmd_gen_fixtures)

    s = sub.add_parser("encode-targets", help="annotation JSON to training maps (PTAR)")
    s.add_argument("--ann", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode_targets)

    s = sub.add_parser("decode", help="detection maps (PTAR) to boxes and corners (JSON)")
    s.add_argument("--maps", required=True)
    s.add_argument("--topk", type=int, default=8)
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("rectify", help="crop and rectify plate features")
    s.add_argument("--features", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fusion-weights", help="PTAR with reduce2..5 and fuse_conv, when features are stages")
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("recognize", help="decode plate strings from crops or logits")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--crops")
    src.add_argument("--logits")
    s.add_argument("--weights")
    s.add_argument("--probs", action="store_true", help="--logits already holds probabilities")
    s.add_argument("--alphabet", required=True)
    s.add_argument("--rules")
    s.add_argument("--beam-width", type=int, default=10)
    s.add_argument("--n-best", type=int, default=5)
    s.add_argument("--det", help="detection JSON to annotate with the decoded text")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_recognize)

    s = sub.add_parser("ctc-loss", help="CTC loss (and gradient) of one T x K logit table")
    s.add_argument("--logits", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--alphabet")
    s.add_argument("--grad")
    s.set_defaults(func=cmd_ctc_loss)

    s = sub.add_parser("eval", help="detection precision / end-to-end accuracy")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--e2e", action="store_true")
    s.add_argument("--one-per-image", action="store_true")
    s.add_argument("--report", help="also write the TSV report here")
    s.add_argument("--figures", help="directory for the IoU histogram")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="deterministic end-to-end smoke run")
    s.add_argument("--out", default="selftest_out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=2)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PlatenetError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
