"""Dense NCHW tensor helpers and the neural primitives the pipeline is built from.

Tensors are plain ``numpy.ndarray`` objects with float32 storage in
(batch, channels, height, width) order. Reductions accumulate in float64 and
are cast back to float32 on return.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "ConvSpec",
    "as_tensor",
    "flat_index",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "concat_channels",
    "activation",
    "bilinear_sample",
]


def as_tensor(x, ndim: Optional[int] = None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array, validating its extents."""
    t = np.ascontiguousarray(x, dtype=np.float32)
    if not 1 <= t.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got {t.ndim}")
    if ndim is not None and t.ndim != ndim:
        raise ShapeError(f"expected rank {ndim}, got shape {t.shape}")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"all extents must be >= 1, got {t.shape}")
    return t


def flat_index(dims: Sequence[int], b: int, c: int, y: int, x: int) -> int:
    _, C, H, W = dims
    return ((b * C + c) * H + y) * W + x


@dataclass(frozen=True)
class ConvSpec:
    """Weights and geometry of one convolution layer.

    ``bn_scale``/``bn_shift`` hold an inference-folded batch norm applied after
    the bias. Activations are not part of a ConvSpec; callers apply them.
    """

    weights: np.ndarray  # out x in x kh x kw
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    bn_scale: Optional[np.ndarray] = None
    bn_shift: Optional[np.ndarray] = None

    def __post_init__(self):
        w = as_tensor(self.weights, ndim=4)
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != out_channels {w.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        if (self.bn_scale is None) != (self.bn_shift is None):
            raise ShapeError("bn_scale and bn_shift must be given together")
        if self.bn_scale is not None:
            for name in ("bn_scale", "bn_shift"):
                v = np.ascontiguousarray(getattr(self, name), dtype=np.float32).reshape(-1)
                if v.shape[0] != w.shape[0]:
                    raise ShapeError(f"{name} length {v.shape[0]} != out_channels {w.shape[0]}")
                object.__setattr__(self, name, v)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @classmethod
    def random(cls, rng: np.random.Generator, in_ch: int, out_ch: int, kh: int, kw: int,
               stride: int = 1, padding: int = 0, bn: bool = False) -> "ConvSpec":
        """Uniform(+-1/sqrt(fan_in)) initialization, used for self-tests."""
        bound = 1.0 / np.sqrt(in_ch * kh * kw)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=out_ch).astype(np.float32)
        scale = shift = None
        if bn:
            scale = np.ones(out_ch, dtype=np.float32)
            shift = np.zeros(out_ch, dtype=np.float32)
        return cls(w, b, stride=stride, padding=padding, bn_scale=scale, bn_shift=shift)


def conv2d(x, spec: ConvSpec) -> np.ndarray:
    """2D cross-correlation with zero padding, bias and optional folded BN."""
    x = as_tensor(x, ndim=4)
    B, C, H, W = x.shape
    if C != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {C}")
    kh, kw = spec.kernel
    p, s = spec.padding, spec.stride
    if kh > H + 2 * p or kw > W + 2 * p:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]  # B, C, H', W', kh, kw
    Ho, Wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    w = spec.weights.astype(np.float64).reshape(spec.out_channels, -1)
    out = cols @ w.T + spec.bias.astype(np.float64)
    if spec.bn_scale is not None:
        out = out * spec.bn_scale.astype(np.float64) + spec.bn_shift.astype(np.float64)
    out = out.reshape(B, Ho, Wo, spec.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=np.float32)


def maxpool2d(x, k: int, stride: Optional[int] = None) -> np.ndarray:
    x = as_tensor(x, ndim=4)
    stride = k if stride is None else stride
    H, W = x.shape[2:]
    if k < 1 or stride < 1:
        raise ShapeError("pool window and stride must be >= 1")
    if H < k or W < k:
        raise ShapeError(f"pool window {k} exceeds input {H}x{W}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return np.ascontiguousarray(windows[:, :, ::stride, ::stride].max(axis=(4, 5)))


def upsample_nearest(x, factor: int) -> np.ndarray:
    x = as_tensor(x, ndim=4)
    if factor < 1:
        raise ShapeError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.ascontiguousarray(np.repeat(np.repeat(x, factor, axis=2), factor, axis=3))


def concat_channels(xs: Sequence) -> np.ndarray:
    ts = [as_tensor(t, ndim=4) for t in xs]
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    b, _, h, w = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (b, h, w):
            raise ShapeError(f"cannot concatenate {t.shape} with {ts[0].shape}")
    return np.ascontiguousarray(np.concatenate(ts, axis=1))


def activation(x, kind: str) -> np.ndarray:
    """Elementwise ``relu``/``sigmoid``, or ``softmax`` over the channel axis (axis 1)."""
    x = np.asarray(x, dtype=np.float32)
    if kind == "relu":
        return np.maximum(x, np.float32(0))
    if kind == "sigmoid":
        xd = x.astype(np.float64)
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        out[~pos] = e / (1.0 + e)
        return out.astype(np.float32)
    if kind in ("softmax", "softmax_over_channels"):
        if x.ndim < 2:
            raise ShapeError("softmax needs a channel axis")
        xd = x.astype(np.float64)
        xd = xd - xd.max(axis=1, keepdims=True)
        e = np.exp(xd)
        return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    raise ValueError(f"unknown activation {kind!r}")


def bilinear_sample(x, points) -> np.ndarray:
    """Sample every channel of ``x`` at real ``(y, x)`` points.

    Stored value ``x[..., i, j]`` sits at coordinate ``(i, j)``. Coordinates are
    clamped to the map border before interpolation. Returns ``B x C x N``.
    """
    x = as_tensor(x, ndim=4)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    H, W = x.shape[2:]
    ys = np.clip(pts[:, 0], 0.0, H - 1)
    xs = np.clip(pts[:, 1], 0.0, W - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = ys - y0
    fx = xs - x0
    xd = x.astype(np.float64)
    top = xd[:, :, y0, x0] * (1 - fx) + xd[:, :, y0, x1] * fx
    bot = xd[:, :, y1, x0] * (1 - fx) + xd[:, :, y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)
