"""Template extraction from feature maps.

A support exemplar (pixel box) is mapped onto the feature grid and the
template is sampled from the smallest grid-aligned cell region that fully
contains it, so its size tracks the exemplar instead of being pooled to a
fixed shape. Sampling uses one bilinear point per output cell, taken at the
cell centers of that aligned region; because those centers coincide with
feature cell centers, interior extractions reduce to exact crops and the
bilinear path only matters where border clamping shifts the sample points.

Continuous feature coordinates follow the half-cell convention: the value of
cell i lives at coordinate i + 0.5, and pixel p maps to coordinate p / stride.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .backbone import FeatureMap
from .boxes import BoxXYWH
from .errors import ConfigError


@dataclass
class Template:
    grid: np.ndarray          # (t_h, t_w, D)
    exemplar: BoxXYWH
    feature_stride: float

    @property
    def t_h(self) -> int:
        return self.grid.shape[0]

    @property
    def t_w(self) -> int:
        return self.grid.shape[1]


def grid_aligned_rect(exemplar: BoxXYWH, stride: float) -> Tuple[int, int, int, int]:
    """(x0, y0, t_w, t_h) of the smallest cell-aligned region covering the box."""
    x0 = int(np.floor(exemplar.x1 / stride))
    y0 = int(np.floor(exemplar.y1 / stride))
    t_w = max(1, int(np.ceil(exemplar.x2 / stride)) - x0)
    t_h = max(1, int(np.ceil(exemplar.y2 / stride)) - y0)
    return x0, y0, t_w, t_h


def template_size(exemplar: BoxXYWH, stride: float) -> Tuple[int, int]:
    """Template cell span (t_h, t_w) for an exemplar at the given stride."""
    _, _, t_w, t_h = grid_aligned_rect(exemplar, stride)
    return t_h, t_w


def _sample_coords(fm: FeatureMap, exemplar: BoxXYWH):
    x0, y0, t_w, t_h = grid_aligned_rect(exemplar, fm.stride)
    # cell centers of the aligned region, clamped into the valid sampling range
    us = np.clip(x0 + np.arange(t_w) + 0.5, 0.5, fm.width - 0.5)
    vs = np.clip(y0 + np.arange(t_h) + 0.5, 0.5, fm.height - 0.5)
    ix0 = np.clip(np.floor(us - 0.5).astype(int), 0, fm.width - 2) if fm.width > 1 \
        else np.zeros(t_w, dtype=int)
    iy0 = np.clip(np.floor(vs - 0.5).astype(int), 0, fm.height - 2) if fm.height > 1 \
        else np.zeros(t_h, dtype=int)
    wx = (us - 0.5 - ix0) if fm.width > 1 else np.zeros(t_w)
    wy = (vs - 0.5 - iy0) if fm.height > 1 else np.zeros(t_h)
    ix1 = np.minimum(ix0 + 1, fm.width - 1)
    iy1 = np.minimum(iy0 + 1, fm.height - 1)
    return ix0, ix1, wx, iy0, iy1, wy


def roi_align_extract(fm: FeatureMap, exemplar: BoxXYWH) -> Template:
    """Bilinear-sample the grid-aligned region of an exemplar into a Template."""
    if exemplar.x2 <= 0 or exemplar.y2 <= 0 or \
            exemplar.x1 >= fm.width * fm.stride or exemplar.y1 >= fm.height * fm.stride:
        raise ValueError(f"exemplar {exemplar} lies fully outside the feature map")
    ix0, ix1, wx, iy0, iy1, wy = _sample_coords(fm, exemplar)
    g = fm.grid
    # gather the four corners for the full (t_h, t_w) lattice at once
    top = g[iy0[:, None], ix0[None, :], :] * (1 - wx)[None, :, None] \
        + g[iy0[:, None], ix1[None, :], :] * wx[None, :, None]
    bot = g[iy1[:, None], ix0[None, :], :] * (1 - wx)[None, :, None] \
        + g[iy1[:, None], ix1[None, :], :] * wx[None, :, None]
    grid = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return Template(grid=grid, exemplar=exemplar, feature_stride=fm.stride)


def roi_align_backward(fm: FeatureMap, exemplar: BoxXYWH,
                       grad_template: np.ndarray) -> np.ndarray:
    """Scatter template gradients back onto the feature grid."""
    t_h, t_w = template_size(exemplar, fm.stride)
    if grad_template.shape[:2] != (t_h, t_w):
        raise ConfigError(f"grad_template shape {grad_template.shape[:2]} != "
                          f"template size {(t_h, t_w)}")
    ix0, ix1, wx, iy0, iy1, wy = _sample_coords(fm, exemplar)
    grad = np.zeros_like(fm.grid)
    gy0 = grad_template * (1 - wy)[:, None, None]
    gy1 = grad_template * wy[:, None, None]
    iy0g = np.broadcast_to(iy0[:, None], (t_h, t_w))
    iy1g = np.broadcast_to(iy1[:, None], (t_h, t_w))
    ix0g = np.broadcast_to(ix0[None, :], (t_h, t_w))
    ix1g = np.broadcast_to(ix1[None, :], (t_h, t_w))
    np.add.at(grad, (iy0g, ix0g), gy0 * (1 - wx)[None, :, None])
    np.add.at(grad, (iy0g, ix1g), gy0 * wx[None, :, None])
    np.add.at(grad, (iy1g, ix0g), gy1 * (1 - wx)[None, :, None])
    np.add.at(grad, (iy1g, ix1g), gy1 * wx[None, :, None])
    return grad
