"""Seeded synthetic plate scenes rendered from a 5x7 bitmap font."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ptar
from .heatmap import PlateAnnotation
from .rectify import apply_homography, solve_homography

DIFFICULTIES = ("axis-aligned", "rotated", "tilted")

# 5x7 glyphs, top row first; '#' = ink
_FONT = {
    "0": ('.###.', '#...#', '#..##', '#.#.#', '##..#', '#...#', '.###.'),
    "1": ('..#..', '.##..', '..#..', '..#..', '..#..', '..#..', '.###.'),
    "2": ('.###.', '#...#', '....#', '...#.', '..#..', '.#...', '#####'),
    "3": ('#####', '...#.', '..#..', '...#.', '....#', '#...#', '.###.'),
    "4": ('...#.', '..##.', '.#.#.', '#..#.', '#####', '...#.', '...#.'),
    "5": ('#####', '#....', '####.', '....#', '....#', '#...#', '.###.'),
    "6": ('..##.', '.#...', '#....', '####.', '#...#', '#...#', '.###.'),
    "7": ('#####', '....#', '...#.', '..#..', '.#...', '.#...', '.#...'),
    "8": ('.###.', '#...#', '#...#', '.###.', '#...#', '#...#', '.###.'),
    "9": ('.###.', '#...#', '#...#', '.####', '....#', '...#.', '.##..'),
    "A": ('.###.', '#...#', '#...#', '#####', '#...#', '#...#', '#...#'),
    "B": ('####.', '#...#', '#...#', '####.', '#...#', '#...#', '####.'),
    "C": ('.###.', '#...#', '#....', '#....', '#....', '#...#', '.###.'),
    "D": ('###..', '#..#.', '#...#', '#...#', '#...#', '#..#.', '###..'),
    "E": ('#####', '#....', '#....', '####.', '#....', '#....', '#####'),
    "F": ('#####', '#....', '#....', '####.', '#....', '#....', '#....'),
    "G": ('.###.', '#...#', '#....', '#.###', '#...#', '#...#', '.####'),
    "H": ('#...#', '#...#', '#...#', '#####', '#...#', '#...#', '#...#'),
    "I": ('.###.', '..#..', '..#..', '..#..', '..#..', '..#..', '.###.'),
    "J": ('..###', '...#.', '...#.', '...#.', '...#.', '#..#.', '.##..'),
    "K": ('#...#', '#..#.', '#.#..', '##...', '#.#..', '#..#.', '#...#'),
    "L": ('#....', '#....', '#....', '#....', '#....', '#....', '#####'),
    "M": ('#...#', '##.##', '#.#.#', '#.#.#', '#...#', '#...#', '#...#'),
    "N": ('#...#', '#...#', '##..#', '#.#.#', '#..##', '#...#', '#...#'),
    "O": ('.###.', '#...#', '#...#', '#...#', '#...#', '#...#', '.###.'),
    "P": ('####.', '#...#', '#...#', '####.', '#....', '#....', '#....'),
    "Q": ('.###.', '#...#', '#...#', '#...#', '#.#.#', '#..#.', '.##.#'),
    "R": ('####.', '#...#', '#...#', '####.', '#.#..', '#..#.', '#...#'),
    "S": ('.####', '#....', '#....', '.###.', '....#', '....#', '####.'),
    "T": ('#####', '..#..', '..#..', '..#..', '..#..', '..#..', '..#..'),
    "U": ('#...#', '#...#', '#...#', '#...#', '#...#', '#...#', '.###.'),
    "V": ('#...#', '#...#', '#...#', '#...#', '#...#', '.#.#.', '..#..'),
    "W": ('#...#', '#...#', '#...#', '#.#.#', '#.#.#', '#.#.#', '.#.#.'),
    "X": ('#...#', '#...#', '.#.#.', '..#..', '.#.#.', '#...#', '#...#'),
    "Y": ('#...#', '#...#', '.#.#.', '..#..', '..#..', '..#..', '..#..'),
    "Z": ('#####', '....#', '...#.', '..#..', '.#...', '#....', '#####'),
}


def glyph(ch: str) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in _FONT[ch]], dtype=np.float32)


def render_plate(text: str, scale: int = 2, margin: int = 3) -> np.ndarray:
    """Binary plate image for ``text`` (1 = ink, 0 = plate background)."""
    gw, gh = 5 * scale, 7 * scale
    gap = scale
    w = 2 * margin + len(text) * gw + (len(text) - 1) * gap
    h = 2 * margin + gh
    img = np.zeros((h, w), dtype=np.float32)
    for i, ch in enumerate(text):
        g = np.kron(glyph(ch), np.ones((scale, scale), dtype=np.float32))
        x0 = margin + i * (gw + gap)
        img[margin:margin + gh, x0:x0 + gw] = g
    return img


@dataclass
class FixtureScene:
    image: np.ndarray  # H x W, single channel
    annotations: list[PlateAnnotation]
    seed: int
    warp: np.ndarray  # plate-canvas -> image homography


def _sample_bilinear_zero(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup where samples outside the image read 0 (mask compositing)."""
    H, W = img.shape
    padded = np.pad(img, 1)
    xs = np.clip(xs + 1, 0, W + 1)
    ys = np.clip(ys + 1, 0, H + 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H)
    fx, fy = xs - x0, ys - y0
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bot = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _random_text(rng: np.random.Generator, length: int = 7) -> str:
    letters = "ABCDEFGHJKLMNPQRSTUVWXYZ"
    digits = "0123456789"
    pool = letters + digits
    return rng.choice(list(letters)) + "".join(rng.choice(list(pool), size=length - 1))


def make_scene(seed: int, difficulty: str = "axis-aligned", size: tuple[int, int] = (256, 128),
               text: str | None = None) -> FixtureScene:
    """One scene of ``size = (width, height)`` with a single warped plate."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng(seed)
    text = text or _random_text(rng)
    plate = render_plate(text)
    ph, pw = plate.shape
    width, height = size
    canvas = np.array([[0, 0], [pw, 0], [0, ph], [pw, ph]], dtype=np.float64)
    scale = rng.uniform(1.0, 1.4)
    angle = 0.0
    if difficulty in ("rotated", "tilted"):
        angle = math.radians(rng.uniform(-45, 45))
    c, s = math.cos(angle), math.sin(angle)
    local = (canvas - [pw / 2, ph / 2]) * scale
    quad = local @ np.array([[c, s], [-s, c]])
    if difficulty == "tilted":
        quad = quad + rng.uniform(-0.12, 0.12, size=(4, 2)) * [pw * scale, ph * scale]
    ext = quad.max(axis=0) - quad.min(axis=0)
    if ext[0] >= width - 4 or ext[1] >= height - 4:
        quad = quad * min((width - 4) / ext[0], (height - 4) / ext[1]) * 0.95
        ext = quad.max(axis=0) - quad.min(axis=0)
    lo = -quad.min(axis=0) + 1
    hi = np.array([width, height]) - quad.max(axis=0) - 1
    offset = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
    quad = quad + offset
    if difficulty == "axis-aligned":
        quad = np.round(quad * 4) / 4  # keep corners exactly representable
    warp = solve_homography(canvas, quad)
    inv = np.linalg.inv(warp)
    gy, gx = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    src = apply_homography(inv, np.stack([gx.ravel(), gy.ravel()], axis=1))
    # plate pixel (i, j) covers [j, j+1) x [i, i+1); sample on its center grid
    ink = _sample_bilinear_zero(plate, src[:, 0] - 0.5, src[:, 1] - 0.5).reshape(height, width)
    inside = _sample_bilinear_zero(np.ones_like(plate), src[:, 0] - 0.5, src[:, 1] - 0.5).reshape(height, width)
    background = rng.uniform(0.0, 0.3, size=(height, width))
    image = background * (1 - inside) + inside * (0.9 - 0.8 * ink)
    corners = apply_homography(warp, canvas)
    if difficulty == "axis-aligned":
        corners = quad
    box = (corners[:, 0].min(), corners[:, 1].min(), corners[:, 0].max(), corners[:, 1].max())
    ann = PlateAnnotation(box, tuple(map(tuple, corners)), text)
    return FixtureScene(image.astype(np.float32), [ann], seed, warp)


def gen_fixtures(count: int, seed: int, difficulty: str = "axis-aligned",
                 size: tuple[int, int] = (256, 128)) -> list[FixtureScene]:
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_scene(int(s), difficulty, size) for s in seeds]


def annotations_json(scenes: list[FixtureScene]) -> dict:
    images = []
    for i, scene in enumerate(scenes):
        h, w = scene.image.shape
        images.append({
            "id": i, "width": w, "height": h,
            "plates": [a.to_dict() for a in scene.annotations],
            "warp": [[float(v) for v in row] for row in scene.warp],
        })
    return {"images": images}


def write_fixtures(out_dir, scenes: list[FixtureScene]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ptar.write(out / "images.ptar", {f"{i}/image": s.image[None, None] for i, s in enumerate(scenes)})
    (out / "annotations.json").write_text(json.dumps(annotations_json(scenes), indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")


def load_annotations(path) -> list[dict]:
    """Read the annotation JSON into ``[{"id", "width", "height", "plates": [PlateAnnotation]}]``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    images = []
    for img in data["images"]:
        images.append({
            "id": img["id"], "width": int(img["width"]), "height": int(img["height"]),
            "plates": [PlateAnnotation.from_dict(p) for p in img.get("plates", [])],
        })
    return images
