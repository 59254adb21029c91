"""Box regressor and presence classifier heads, plus box decoding.

Both heads are conv3x3 -> LeakyReLU -> per-position linear. The regressor
emits raw (dx, dy, aw, ah) per cell; decoding turns those into pixel boxes by
shifting and exponentially rescaling the support exemplar's size, evaluated in
feature units at each cell center and converted to pixels by the stride.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from . import numerics as nm
from .boxes import BoxXYWH
from .errors import ConfigError, NonFiniteError
from .numerics import LayerParams


class DecodeVariant(str, Enum):
    NONE = "none"                    # emit the exemplar box at every cell
    UNCONDITIONED = "unconditioned"  # raw shift, absolute exp scale
    SCALE_ONLY = "scale_only"        # raw shift, exemplar-scaled size
    FULL = "full"                    # exemplar-scaled shift and size


@dataclass
class HeadCache:
    head_in: np.ndarray
    pre_act: np.ndarray
    hidden: np.ndarray
    out: np.ndarray


def head_forward(head_in: np.ndarray, conv: LayerParams, lin: LayerParams,
                 slope: float = 0.01) -> HeadCache:
    pre = nm.conv3x3_forward(head_in, conv)
    hidden = nm.leaky_relu(pre, slope)
    out = nm.linear_forward(hidden, lin)
    return HeadCache(head_in=head_in, pre_act=pre, hidden=hidden, out=out)


def head_backward(cache: HeadCache, conv: LayerParams, lin: LayerParams,
                  grad_out: np.ndarray, slope: float = 0.01) -> np.ndarray:
    g = nm.linear_backward(cache.hidden, lin, grad_out)
    g = nm.leaky_relu_backward(cache.pre_act, g, slope)
    return nm.conv3x3_backward(cache.head_in, conv, g)


def regress(head_in: np.ndarray, conv: LayerParams, lin: LayerParams,
            slope: float = 0.01) -> HeadCache:
    """Raw 4-channel regression map; no activation on the output."""
    cache = head_forward(head_in, conv, lin, slope)
    if cache.out.shape[2] != 4:
        raise ConfigError(f"regressor must emit 4 channels, got {cache.out.shape[2]}")
    return cache


def presence(head_in: np.ndarray, conv: LayerParams, lin: LayerParams,
             slope: float = 0.01) -> Tuple[HeadCache, np.ndarray]:
    """Per-cell presence probabilities in (0, 1)."""
    cache = head_forward(head_in, conv, lin, slope)
    if cache.out.shape[2] != 1:
        raise ConfigError(f"classifier must emit 1 channel, got {cache.out.shape[2]}")
    return cache, nm.sigmoid(cache.out)


def _cell_centers(h: int, w: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(h, dtype=dtype) + 0.5)[:, None]
    xs = (np.arange(w, dtype=dtype) + 0.5)[None, :]
    return ys, xs


def decode_boxes(reg: np.ndarray, exemplar: BoxXYWH, stride: float,
                 variant: DecodeVariant = DecodeVariant.FULL) -> np.ndarray:
    """Per-cell (H, W, 4) pixel boxes (cx, cy, w, h) from the regression map."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if not np.isfinite(reg).all():
        bad = np.argwhere(~np.isfinite(reg))[0]
        raise NonFiniteError(f"non-finite regression value at cell "
                             f"(y={bad[0]}, x={bad[1]}, c={bad[2]})")
    h, w = reg.shape[:2]
    ys, xs = _cell_centers(h, w, reg.dtype)
    s_w = exemplar.w / stride
    s_h = exemplar.h / stride
    out = np.empty((h, w, 4), dtype=reg.dtype)
    if variant == DecodeVariant.NONE:
        out[..., 0] = xs
        out[..., 1] = ys
        out[..., 2] = s_w
        out[..., 3] = s_h
    elif variant == DecodeVariant.UNCONDITIONED:
        out[..., 0] = xs + reg[..., 0]
        out[..., 1] = ys + reg[..., 1]
        out[..., 2] = np.exp(reg[..., 2])
        out[..., 3] = np.exp(reg[..., 3])
    elif variant == DecodeVariant.SCALE_ONLY:
        out[..., 0] = xs + reg[..., 0]
        out[..., 1] = ys + reg[..., 1]
        out[..., 2] = np.exp(reg[..., 2]) * s_w
        out[..., 3] = np.exp(reg[..., 3]) * s_h
    else:
        out[..., 0] = xs + s_w * reg[..., 0]
        out[..., 1] = ys + s_h * reg[..., 1]
        out[..., 2] = np.exp(reg[..., 2]) * s_w
        out[..., 3] = np.exp(reg[..., 3]) * s_h
    out *= stride
    return out


def decode_backward(reg: np.ndarray, boxes: np.ndarray, grad_boxes: np.ndarray,
                    exemplar: BoxXYWH, stride: float,
                    variant: DecodeVariant) -> np.ndarray:
    """Gradient of decoded pixel boxes wrt the raw regression map.

    The exemplar size is a constant of the decoding, not a differentiable
    input. boxes must be the matching decode_boxes output (its w/h channels
    carry the exp terms needed for the scale gradients).
    """
    g = np.zeros_like(reg)
    if variant == DecodeVariant.NONE:
        return g
    if variant == DecodeVariant.FULL:
        g[..., 0] = grad_boxes[..., 0] * exemplar.w  # stride * s_w
        g[..., 1] = grad_boxes[..., 1] * exemplar.h
    else:
        g[..., 0] = grad_boxes[..., 0] * stride
        g[..., 1] = grad_boxes[..., 1] * stride
    # d(w)/d(aw) = w for every exponential parameterization
    g[..., 2] = grad_boxes[..., 2] * boxes[..., 2]
    g[..., 3] = grad_boxes[..., 3] * boxes[..., 3]
    return g
