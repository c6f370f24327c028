"""Channel reduction and top-down pyramid fusion into the shared feature map."""
from __future__ import annotations

from dataclasses import dataclass
import os
from typing import Mapping, Union

import numpy as np

from . import ptar
from .errors import MissingStageError, ShapeError
from .tensor import ConvSpec, activation, as_tensor, concat_channels, conv2d, upsample_nearest

STAGES = ("c2", "c3", "c4", "c5")
STAGE_CHANNELS = (64, 128, 256, 512)
FEATURE_CHANNELS = 128


def validate_stages(stages: Mapping[str, np.ndarray]) -> tuple[np.ndarray, ...]:
    """Check that c2..c5 exist, share a batch and halve spatially per level."""
    missing = [name for name in STAGES if name not in stages]
    if missing:
        raise MissingStageError(f"missing stage {', '.join(missing)}")
    cs = tuple(as_tensor(stages[name], ndim=4) for name in STAGES)
    for lo, hi, name in zip(cs, cs[1:], STAGES[1:]):
        if lo.shape[0] != hi.shape[0]:
            raise ShapeError(f"batch mismatch at {name}")
        if lo.shape[2] != 2 * hi.shape[2] or lo.shape[3] != 2 * hi.shape[3]:
            raise ShapeError(
                f"inconsistent spatial ratio: {name} is {hi.shape[2:]} but previous level is {lo.shape[2:]}")
    return cs


def standin_backbone(seed: int, image=None, height: int = 128, width: int = 256,
                     channels=STAGE_CHANNELS) -> tuple[np.ndarray, ...]:
    """Fixed random-weight CNN that emits stride 4/8/16/32 stage outputs.

    A stride-2 stem is followed by four stride-2 3x3 conv + ReLU stages. When
    ``image`` is None a seeded noise image of ``height`` x ``width`` is used.
    """
    rng = np.random.default_rng(seed)
    if image is None:
        image = rng.uniform(0.0, 1.0, size=(1, 1, height, width)).astype(np.float32)
    x = as_tensor(image, ndim=4)
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeError(f"stand-in backbone needs extents divisible by 32, got {x.shape[2:]}")
    stem = ConvSpec.random(rng, x.shape[1], 32, 3, 3, stride=2, padding=1)
    x = activation(conv2d(x, stem), "relu")
    outs = []
    in_ch = 32
    for out_ch in channels:
        spec = ConvSpec.random(rng, in_ch, out_ch, 3, 3, stride=2, padding=1)
        x = activation(conv2d(x, spec), "relu")
        outs.append(x)
        in_ch = out_ch
    return tuple(outs)


def load_backbone_features(source: Union[str, os.PathLike, int, Mapping[str, np.ndarray]],
                           **standin_kwargs) -> tuple[np.ndarray, ...]:
    """Return validated (c2, c3, c4, c5) from a PTAR path, a tensor mapping or a seed."""
    if isinstance(source, (int, np.integer)):
        return validate_stages(dict(zip(STAGES, standin_backbone(int(source), **standin_kwargs))))
    if isinstance(source, Mapping):
        return validate_stages(source)
    return validate_stages(ptar.read(source))


@dataclass(frozen=True)
class FusionWeights:
    reduce: tuple[ConvSpec, ConvSpec, ConvSpec, ConvSpec]
    fuse_conv: ConvSpec

    @classmethod
    def random(cls, seed: int, stage_channels=STAGE_CHANNELS) -> "FusionWeights":
        rng = np.random.default_rng(seed)
        reduce = tuple(ConvSpec.random(rng, c, FEATURE_CHANNELS, 1, 1, bn=True) for c in stage_channels)
        fuse_conv = ConvSpec.random(rng, 4 * FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3, padding=1, bn=True)
        return cls(reduce, fuse_conv)

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "FusionWeights":
        names = [f"reduce{k}" for k in range(2, 6)]
        reduce = tuple(conv_from_tensors(tensors, n, padding=0) for n in names)
        return cls(reduce, conv_from_tensors(tensors, "fuse_conv", padding=1))

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, spec in zip(range(2, 6), self.reduce):
            out.update(conv_to_tensors(spec, f"reduce{k}"))
        out.update(conv_to_tensors(self.fuse_conv, "fuse_conv"))
        return out


def conv_from_tensors(tensors: Mapping[str, np.ndarray], name: str, padding: int = 0,
                      stride: int = 1) -> ConvSpec:
    """Build a ConvSpec from ``<name>.weight``/``.bias`` and optional ``.bn_scale``/``.bn_shift``."""
    try:
        w = tensors[f"{name}.weight"]
        b = tensors[f"{name}.bias"]
    except KeyError as exc:
        raise ShapeError(f"missing weights for layer {name}: {exc.args[0]}") from None
    return ConvSpec(w, b, stride=stride, padding=padding,
                    bn_scale=tensors.get(f"{name}.bn_scale"), bn_shift=tensors.get(f"{name}.bn_shift"))


def conv_to_tensors(spec: ConvSpec, name: str) -> dict[str, np.ndarray]:
    out = {f"{name}.weight": spec.weights, f"{name}.bias": spec.bias}
    if spec.bn_scale is not None:
        out[f"{name}.bn_scale"] = spec.bn_scale
        out[f"{name}.bn_shift"] = spec.bn_shift
    return out


def reduce_channels(stages, weights: FusionWeights) -> tuple[np.ndarray, ...]:
    # BN and ReLU live inside the 1x1 reduction; the pyramid sums below are raw.
    return tuple(activation(conv2d(c, spec), "relu") for c, spec in zip(stages, weights.reduce))


def build_pyramid(c2r, c3r, c4r, c5r) -> tuple[np.ndarray, ...]:
    """Top-down pyramid: p5 = c5', p_k = 0.5 c_k' + 0.5 up2(p_{k+1})."""
    p5 = as_tensor(c5r, ndim=4).copy()
    levels = [p5]
    for c in (c4r, c3r, c2r):
        c = as_tensor(c, ndim=4)
        up = upsample_nearest(levels[-1], 2)
        if up.shape != c.shape:
            raise ShapeError(f"pyramid shape mismatch: {c.shape} vs upsampled {up.shape}")
        levels.append(np.float32(0.5) * c + np.float32(0.5) * up)
    p5, p4, p3, p2 = levels
    return p2, p3, p4, p5


def fuse(p2, p3, p4, p5, fuse_conv: ConvSpec) -> np.ndarray:
    """Concatenate p2 with p3/p4/p5 upsampled to p2's extent, then 3x3 conv + BN + ReLU."""
    ups = [as_tensor(p2, ndim=4), upsample_nearest(p3, 2), upsample_nearest(p4, 4), upsample_nearest(p5, 8)]
    for u in ups[1:]:
        if u.shape[2:] != ups[0].shape[2:]:
            raise ShapeError(f"spatial mismatch after upsampling: {u.shape} vs {ups[0].shape}")
    f = concat_channels(ups)
    return activation(conv2d(f, fuse_conv), "relu")


def shared_features(stages, weights: FusionWeights) -> np.ndarray:
    """Backbone stages (c2..c5) to the B x 128 x H/4 x W/4 shared feature map."""
    if isinstance(stages, Mapping):
        stages = validate_stages(stages)
    reduced = reduce_channels(stages, weights)
    return fuse(*build_pyramid(*reduced), weights.fuse_conv)
