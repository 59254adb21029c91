"""Turning head outputs into final detections.

Per exemplar: threshold the presence map, keep each surviving cell's decoded
box. With several exemplars and/or feature scales, candidate sets are unioned
and a single greedy NMS resolves duplicates; candidates therefore can only be
added by extra exemplars or scales, never removed, before NMS runs. An
optional refine hook (an external box post-processor) runs on the aggregated
candidates just before NMS.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import numerics as nm
from .backbone import FeatureMap
from .boxes import BoxXYWH, xywh_to_xyxy
from .model import Model


@dataclass(frozen=True)
class Detection:
    box: BoxXYWH
    score: float
    exemplar_id: int = 0
    scale_id: int = 0


RefineHook = Callable[[List[Detection]], List[Detection]]


@dataclass
class InferConfig:
    tau: float = 0.4
    nms_iou: float = 0.5
    scales: Optional[List[int]] = None   # feature resolutions; None = native
    refine_hook: Optional[RefineHook] = None

    def __post_init__(self):
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError(f"nms_iou must be in (0, 1), got {self.nms_iou}")


def threshold_filter(probs: np.ndarray, boxes: np.ndarray, tau: float,
                     exemplar_id: int = 0, scale_id: int = 0) -> List[Detection]:
    """One Detection per cell with score >= tau, in row-major cell order."""
    p = probs[..., 0] if probs.ndim == 3 else probs
    out: List[Detection] = []
    for y, x in np.argwhere(p >= tau):
        cx, cy, w, h = (float(v) for v in boxes[y, x])
        out.append(Detection(box=BoxXYWH(cx, cy, w, h), score=float(p[y, x]),
                             exemplar_id=exemplar_id, scale_id=scale_id))
    return out


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy by descending score; suppress IoU >= iou_thresh against any
    kept box. Score ties break to the earlier list position."""
    if not dets:
        return []
    boxes = xywh_to_xyxy(np.array([d.box.as_array() for d in dets]))
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep: List[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
        order = rest[iou < iou_thresh]
    return [dets[i] for i in keep]


def _resize_feature_map(fm: FeatureMap, resolution: int, scale_id: int) -> FeatureMap:
    if resolution == fm.height and resolution == fm.width:
        return replace(fm, scale_id=scale_id)
    grid = nm.bilinear_resize(fm.grid, resolution, resolution)
    return FeatureMap(grid=grid, stride=fm.stride * fm.height / resolution,
                      source=fm.source, scale_id=scale_id)


def detect_one_exemplar(model: Model, fm: FeatureMap, exemplar: BoxXYWH,
                        cfg: InferConfig, exemplar_id: int = 0) -> List[Detection]:
    """Template -> match -> heads -> decode -> threshold on one feature map.

    No NMS here: aggregation across exemplars/scales happens before the joint
    suppression step.
    """
    state = model.forward_on_features(fm, exemplar)
    return threshold_filter(state.probs, state.boxes, cfg.tau,
                            exemplar_id=exemplar_id, scale_id=fm.scale_id)


def detect_multi_scale(model: Model, source: Union[np.ndarray, FeatureMap],
                       exemplars: Sequence[BoxXYWH],
                       cfg: InferConfig) -> List[Detection]:
    """Full inference: per-exemplar, per-scale candidates -> one joint NMS."""
    if len(exemplars) == 0:
        raise ValueError("at least one exemplar is required")
    fm, _, _, _ = model.extract_features(source)
    resolutions = cfg.scales if cfg.scales else [fm.height]
    candidates: List[Detection] = []
    for scale_id, resolution in enumerate(resolutions):
        scaled = _resize_feature_map(fm, int(resolution), scale_id)
        for ex_id, exemplar in enumerate(exemplars):
            candidates.extend(detect_one_exemplar(model, scaled, exemplar,
                                                  cfg, exemplar_id=ex_id))
    if cfg.refine_hook is not None:
        candidates = list(cfg.refine_hook(candidates))
    return nms(candidates, cfg.nms_iou)


def detect_few_shot(model: Model, source: Union[np.ndarray, FeatureMap],
                    exemplars: Sequence[BoxXYWH],
                    cfg: InferConfig) -> List[Detection]:
    """Single-scale few-shot inference (union of exemplars, joint NMS)."""
    return detect_multi_scale(model, source, exemplars,
                              replace(cfg, scales=None))
