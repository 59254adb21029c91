"""Detection and counting metrics.

Every (image, pattern) pair is one evaluation unit: its predictions can only
match its own ground-truth boxes. Predictions are pooled over all units into
a single precision/recall sweep per IoU threshold, greedy highest-score-first
matching with one-to-one GT assignment, and the average precision uses
101-point interpolated precision. Counting errors compare post-NMS detection
counts per unit against the GT count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou_matrix
from .data import PredictionEntry
from .synth import SampleAnnotation

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
N_RECALL_POINTS = 101


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    mae: float
    rmse: float
    per_pattern: Dict[int, Dict[str, float]] = field(default_factory=dict)
    n_units: int = 0
    n_gt: int = 0
    pr_curves: Dict[float, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "mae": self.mae, "rmse": self.rmse, "n_units": self.n_units,
                "n_gt": self.n_gt,
                "per_pattern": {str(k): v for k, v in self.per_pattern.items()}}


def _match_unit(pred_boxes: np.ndarray, gt_boxes: np.ndarray,
                threshold: float) -> np.ndarray:
    """TP flags for one unit's predictions (already sorted by score desc)."""
    tp = np.zeros(len(pred_boxes), dtype=bool)
    if len(gt_boxes) == 0:
        return tp
    ious = iou_matrix(pred_boxes[:, :4], gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(pred_boxes)):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= threshold:
            tp[i] = True
            taken[j] = True
    return tp


def _interp_ap(tp_sorted: np.ndarray, n_gt: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """(AP, recall pts, interpolated precision pts) for pooled TP flags."""
    recall_pts = np.linspace(0.0, 1.0, N_RECALL_POINTS)
    if n_gt == 0 or tp_sorted.size == 0:
        return 0.0, recall_pts, np.zeros(N_RECALL_POINTS)
    tp_cum = np.cumsum(tp_sorted)
    fp_cum = np.cumsum(~tp_sorted)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: max precision at recall >= r
    order = np.argsort(recall, kind="stable")
    rec_sorted = recall[order]
    prec_sorted = precision[order]
    prec_env = np.maximum.accumulate(prec_sorted[::-1])[::-1]
    idx = np.searchsorted(rec_sorted, recall_pts, side="left")
    interp = np.where(idx < len(rec_sorted), prec_env[np.minimum(idx, len(rec_sorted) - 1)],
                      0.0)
    return float(interp.mean()), recall_pts, interp


def _pool(preds: Sequence[PredictionEntry]):
    """Flatten to one globally score-sorted list of (unit index, box row)."""
    rows = []
    for u, entry in enumerate(preds):
        for b in entry.boxes:
            rows.append((u, b))
    rows.sort(key=lambda r: -r[1][4])  # stable: ties keep unit/box order
    return rows


def _ap_over_units(preds: List[PredictionEntry],
                   gts: Dict[Tuple[str, int], np.ndarray],
                   thresholds: Sequence[float]):
    pooled = _pool(preds)
    n_gt = int(sum(len(g) for g in gts.values()))
    ap_t: Dict[float, float] = {}
    curves: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}
    for t in thresholds:
        # per-unit greedy matching at this threshold, then pooled ordering
        unit_tp: Dict[int, np.ndarray] = {}
        for u, entry in enumerate(preds):
            unit_tp[u] = _match_unit(entry.boxes, gts[entry.key], t)
        per_unit_pos = {u: 0 for u in unit_tp}
        flags = np.zeros(len(pooled), dtype=bool)
        for i, (u, _) in enumerate(pooled):
            flags[i] = unit_tp[u][per_unit_pos[u]]
            per_unit_pos[u] += 1
        ap, rec, prec = _interp_ap(flags, n_gt)
        ap_t[float(t)] = ap
        curves[float(t)] = (rec, prec)
    return ap_t, curves, n_gt


def evaluate(preds: Sequence[PredictionEntry], gts: Sequence[SampleAnnotation],
             thresholds: Sequence[float] = COCO_THRESHOLDS) -> EvalReport:
    """Score a prediction dump against dataset annotations."""
    seen = set()
    for e in preds:
        if e.key in seen:
            raise ValueError(f"duplicate prediction entry for {e.key}")
        seen.add(e.key)
    gt_map: Dict[Tuple[str, int], np.ndarray] = {}
    for ann in gts:
        for p in ann.patterns:
            key = (ann.image, p.pattern_id)
            if key in gt_map:
                raise ValueError(f"duplicate annotation for {key}")
            gt_map[key] = np.array([[b.cx, b.cy, b.w, b.h] for b in p.boxes],
                                   dtype=np.float64).reshape(-1, 4)
    entries = []
    for e in preds:
        if e.key not in gt_map:
            raise ValueError(f"prediction for unknown unit {e.key}")
        boxes = np.asarray(e.boxes, dtype=np.float64).reshape(-1, 5)
        if len(boxes):
            boxes = boxes[np.argsort(-boxes[:, 4], kind="stable")]
        entries.append(PredictionEntry(image=e.image, pattern=e.pattern,
                                       boxes=boxes))
    covered = {e.key for e in entries}
    for key in sorted(gt_map):
        if key not in covered:  # unpredicted units still count their GT
            entries.append(PredictionEntry(image=key[0], pattern=key[1],
                                           boxes=np.zeros((0, 5))))

    ap_t, curves, n_gt = _ap_over_units(entries, gt_map, thresholds)
    errors = np.array([len(e.boxes) - len(gt_map[e.key]) for e in entries],
                      dtype=np.float64)
    mae = float(np.abs(errors).mean()) if len(entries) else 0.0
    rmse = float(np.sqrt((errors ** 2).mean())) if len(entries) else 0.0

    per_pattern: Dict[int, Dict[str, float]] = {}
    for pid in sorted({e.pattern for e in entries}):
        sub = [e for e in entries if e.pattern == pid]
        sub_gt = {e.key: gt_map[e.key] for e in sub}
        sub_ap, _, _ = _ap_over_units(sub, sub_gt, thresholds)
        sub_err = np.array([len(e.boxes) - len(gt_map[e.key]) for e in sub],
                           dtype=np.float64)
        per_pattern[pid] = {
            "ap": float(np.mean(list(sub_ap.values()))),
            "ap50": sub_ap[0.5], "ap75": sub_ap[0.75],
            "mae": float(np.abs(sub_err).mean()),
            "rmse": float(np.sqrt((sub_err ** 2).mean())),
            "n_units": float(len(sub)),
            "n_gt": float(sum(len(gt_map[e.key]) for e in sub)),
        }

    return EvalReport(ap=float(np.mean(list(ap_t.values()))),
                      ap50=ap_t[0.5], ap75=ap_t[0.75], mae=mae, rmse=rmse,
                      per_pattern=per_pattern, n_units=len(entries), n_gt=n_gt,
                      pr_curves=curves)
