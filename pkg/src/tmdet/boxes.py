"""Box geometry shared by the whole pipeline.

Boxes are center-parameterized (cx, cy, w, h) in image pixels. Array-heavy
paths (NMS, evaluation, decoding) work on (N, 4) float arrays in the same
order; corner form (x1, y1, x2, y2) is only an internal representation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoxXYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if not all(np.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box values must be finite")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BoxXYWH":
        cx, cy, w, h = (float(v) for v in a)
        return BoxXYWH(cx, cy, w, h)


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    """(..., 4) center boxes -> corner boxes."""
    b = np.asarray(b, dtype=np.float64)
    out = np.empty_like(b)
    out[..., 0] = b[..., 0] - b[..., 2] / 2.0
    out[..., 1] = b[..., 1] - b[..., 3] / 2.0
    out[..., 2] = b[..., 0] + b[..., 2] / 2.0
    out[..., 3] = b[..., 1] + b[..., 3] / 2.0
    return out


def xyxy_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = np.empty_like(b)
    out[..., 0] = (b[..., 0] + b[..., 2]) / 2.0
    out[..., 1] = (b[..., 1] + b[..., 3]) / 2.0
    out[..., 2] = b[..., 2] - b[..., 0]
    out[..., 3] = b[..., 3] - b[..., 1]
    return out


def iou_matrix(a_xywh: np.ndarray, b_xywh: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) center boxes -> (N, M)."""
    a = xywh_to_xyxy(np.atleast_2d(a_xywh))
    b = xywh_to_xyxy(np.atleast_2d(b_xywh))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def iou_single(a: BoxXYWH, b: BoxXYWH) -> float:
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])
