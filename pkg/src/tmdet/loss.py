"""Training targets and losses.

Presence labels are 1 on the extended center set: cells whose normalized L1
distance to some ground-truth center, measured in units of that box's size,
is at most the margin delta (a rhombus around each center). Each positive
cell carries the box of its nearest qualifying ground truth. The presence
loss is binary cross-entropy over all cells; the box loss is 1 - gIoU over
positive cells, differentiated through the decoded boxes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .boxes import BoxXYWH, xywh_to_xyxy
from .errors import ConfigError, NonFiniteError

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.33
BCE_EPS = 1e-7


@dataclass
class MarginConfig:
    delta: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not (0.0 < self.delta <= 0.5):
            raise ValueError(f"delta must be in (0, 0.5], got {self.delta}")


@dataclass
class TargetMaps:
    presence: np.ndarray      # (H, W) of {0.0, 1.0}
    box_target: np.ndarray    # (H, W, 4) pixel boxes, valid where presence == 1
    assignment: np.ndarray    # (H, W) GT index, -1 where negative

    @property
    def positive_count(self) -> int:
        return int(self.presence.sum())


def extended_center_set(gt_boxes: Sequence[BoxXYWH], stride: float, h: int, w: int,
                        delta: float = DEFAULT_MARGIN) -> TargetMaps:
    """Label cells inside the per-GT rhombus |dx|/w + |dy|/h <= delta.

    Distances are taken between cell centers and GT centers in feature units.
    Cells inside several rhombi go to the GT with the smallest normalized
    distance; ties break to the lowest GT index.
    """
    presence = np.zeros((h, w), dtype=np.float64)
    assignment = np.full((h, w), -1, dtype=np.int64)
    box_target = np.zeros((h, w, 4), dtype=np.float64)
    if not gt_boxes:
        return TargetMaps(presence, box_target, assignment)
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    best = np.full((h, w), np.inf)
    for gi, gt in enumerate(gt_boxes):
        cx, cy = gt.cx / stride, gt.cy / stride
        bw, bh = gt.w / stride, gt.h / stride
        dist = np.abs(cx - xs) / bw + np.abs(cy - ys) / bh
        hit = (dist <= delta) & (dist < best)
        assignment[hit] = gi
        best[hit] = dist[hit]
    pos = assignment >= 0
    presence[pos] = 1.0
    gt_arr = np.stack([g.as_array() for g in gt_boxes])
    box_target[pos] = gt_arr[assignment[pos]]
    return TargetMaps(presence, box_target, assignment)


# --------------------------------------------------------------------------- #
# Presence loss (BCE on probabilities)                                         #
# --------------------------------------------------------------------------- #

def presence_loss(pred: np.ndarray, target: TargetMaps,
                  reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """BCE over every cell; returns (loss, grad wrt pred probabilities)."""
    p = pred[..., 0] if pred.ndim == 3 else pred
    if p.shape != target.presence.shape:
        raise ConfigError(f"prediction {p.shape} != target {target.presence.shape}")
    if ((p <= 0.0) | (p >= 1.0)).any():
        log.debug("presence probabilities at 0/1 clamped to [%g, 1-%g]",
                  BCE_EPS, BCE_EPS)
    clamped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    t = target.presence
    per_cell = -(t * np.log(clamped) + (1.0 - t) * np.log1p(-clamped))
    grad = (clamped - t) / (clamped * (1.0 - clamped))
    grad = np.where((p > BCE_EPS) & (p < 1.0 - BCE_EPS), grad, 0.0)  # clamp subgradient
    if reduction == "mean":
        scale = 1.0 / p.size
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = grad * scale
    if pred.ndim == 3:
        grad = grad[..., None]
    return float(per_cell.sum() * scale), grad


# --------------------------------------------------------------------------- #
# Generalized IoU                                                              #
# --------------------------------------------------------------------------- #

def giou_array(pred_xywh: np.ndarray, gt_xywh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise gIoU of (N, 4) box pairs plus d(gIoU)/d(pred xywh).

    gIoU = IoU - |C \\ (A u B)| / |C| with C the smallest enclosing box.
    Piecewise-linear corners use one-sided subgradients at ties.
    """
    p = xywh_to_xyxy(pred_xywh)
    g = xywh_to_xyxy(gt_xywh)
    px1, py1, px2, py2 = (p[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (g[:, i] for i in range(4))

    ap = (px2 - px1) * (py2 - py1)
    ag = (gx2 - gx1) * (gy2 - gy1)
    iw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    live = (iw > 0) & (ih > 0)
    iw_c = np.clip(iw, 0.0, None)
    ih_c = np.clip(ih, 0.0, None)
    inter = iw_c * ih_c
    union = ap + ag - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    hull = cw * ch
    iou = inter / union
    giou = iou - (hull - union) / hull

    # derivatives of the building blocks wrt pred corners
    d_ap = np.stack([-(py2 - py1), -(px2 - px1), (py2 - py1), (px2 - px1)], axis=1)
    live_f = live.astype(p.dtype)
    zeros = np.zeros_like(px1)
    d_iw = np.stack([-(px1 >= gx1).astype(p.dtype) * live_f, zeros,
                     (px2 <= gx2).astype(p.dtype) * live_f, zeros], axis=1)
    d_ih = np.stack([zeros, -(py1 >= gy1).astype(p.dtype) * live_f,
                     zeros, (py2 <= gy2).astype(p.dtype) * live_f], axis=1)
    d_inter = d_iw * ih_c[:, None] + d_ih * iw_c[:, None]
    d_union = d_ap - d_inter
    d_cw = np.stack([-(px1 <= gx1).astype(p.dtype), zeros,
                     (px2 >= gx2).astype(p.dtype), zeros], axis=1)
    d_ch = np.stack([zeros, -(py1 <= gy1).astype(p.dtype),
                     zeros, (py2 >= gy2).astype(p.dtype)], axis=1)
    d_hull = d_cw * ch[:, None] + d_ch * cw[:, None]

    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / (union ** 2)[:, None]
    # d of (hull - union)/hull = (union * d_hull - hull * d_union) / hull^2
    d_pen = (union[:, None] * d_hull - hull[:, None] * d_union) / (hull ** 2)[:, None]
    d_giou_xyxy = d_iou - d_pen

    # chain to center parameterization: x1 = cx - w/2, x2 = cx + w/2
    d_giou = np.empty_like(d_giou_xyxy)
    d_giou[:, 0] = d_giou_xyxy[:, 0] + d_giou_xyxy[:, 2]
    d_giou[:, 1] = d_giou_xyxy[:, 1] + d_giou_xyxy[:, 3]
    d_giou[:, 2] = (d_giou_xyxy[:, 2] - d_giou_xyxy[:, 0]) / 2.0
    d_giou[:, 3] = (d_giou_xyxy[:, 3] - d_giou_xyxy[:, 1]) / 2.0
    return giou, d_giou


def giou(a: BoxXYWH, b: BoxXYWH) -> float:
    """Generalized IoU of two boxes, in (-1, 1]."""
    val, _ = giou_array(a.as_array()[None], b.as_array()[None])
    return float(val[0])


def giou_kink_margin(pred_xywh: np.ndarray, gt_xywh: np.ndarray) -> float:
    """Distance to the nearest non-smooth point of the gIoU surface.

    Finite-difference checks are only meaningful when no min/max tie or
    intersection sign change sits inside the probe interval; callers compare
    this margin against their step size.
    """
    p = xywh_to_xyxy(np.atleast_2d(pred_xywh))
    g = xywh_to_xyxy(np.atleast_2d(gt_xywh))
    corner_gaps = np.abs(p - g)
    iw = np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0])
    ih = np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1])
    return float(min(corner_gaps.min(), np.abs(iw).min(), np.abs(ih).min()))


# --------------------------------------------------------------------------- #
# Box loss                                                                     #
# --------------------------------------------------------------------------- #

def box_loss(decoded: np.ndarray, target: TargetMaps,
             reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """Sum/mean of (1 - gIoU) over positive cells; grad wrt decoded boxes."""
    grad = np.zeros_like(decoded)
    pos = target.presence > 0.5
    n = int(pos.sum())
    if n == 0:
        log.warning("box loss over zero positive cells")
        return 0.0, grad
    vals, d_vals = giou_array(decoded[pos], target.box_target[pos])
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad[pos] = -d_vals * scale
    return float((1.0 - vals).sum() * scale), grad


def total_loss(lp: float, lb: float) -> float:
    """Unweighted sum of the presence and box terms."""
    if not (np.isfinite(lp) and np.isfinite(lb)):
        raise NonFiniteError(f"non-finite loss components: lp={lp}, lb={lb}")
    return lp + lb
