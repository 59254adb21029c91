"""Correlation of a template against the feature map.

The main path slides the template over the map with channel-wise
multiplication, keeping both the spatial layout of the template and the
channel dimension. Two degraded variants exist for comparison runs: matching
against the spatially average-pooled template (one prototype vector) and a
scalar cosine-similarity map. All reads outside the map are zero.
"""
from __future__ import annotations

from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .backbone import FeatureMap
from .errors import ConfigError
from .template import Template


class MatchVariant(str, Enum):
    F_ONLY = "f"            # no matching signal at all
    TM_ONLY = "tm"          # template-matching map alone
    CONCAT_TM = "f_tm"      # [TM; features] — the default
    CONCAT_COS = "f_cos"    # [cosine map; features]
    CONCAT_PM = "f_pm"      # [prototype map; features]

    def head_depth(self, feature_depth: int) -> int:
        return {
            MatchVariant.F_ONLY: feature_depth,
            MatchVariant.TM_ONLY: feature_depth,
            MatchVariant.CONCAT_TM: 2 * feature_depth,
            MatchVariant.CONCAT_COS: feature_depth + 1,
            MatchVariant.CONCAT_PM: 2 * feature_depth,
        }[self]


def _check_depths(fm: FeatureMap, t: Template) -> None:
    if fm.depth != t.grid.shape[2]:
        raise ConfigError(f"feature depth {fm.depth} != template depth {t.grid.shape[2]}")


def _pad_offsets(t_h: int, t_w: int) -> Tuple[int, int, int, int]:
    cy, cx = t_h // 2, t_w // 2
    return cy, t_h - 1 - cy, cx, t_w - 1 - cx


def template_match(fm: FeatureMap, t: Template, tm_scale: float = 1.0) -> np.ndarray:
    """Channel-wise sliding correlation, normalized by the template cell count.

    out(x, y, d) = scale / (t_w t_h) * sum_{x', y'}
        F(x + x' - floor(t_w/2), y + y' - floor(t_h/2), d) * T(x', y', d)
    """
    _check_depths(fm, t)
    th, tw = t.grid.shape[:2]
    top, bottom, left, right = _pad_offsets(th, tw)
    fp = np.pad(fm.grid, ((top, bottom), (left, right), (0, 0)))
    h, w, d = fm.grid.shape
    out = np.zeros((h, w, d), dtype=fm.grid.dtype)
    for yy in range(th):
        for xx in range(tw):
            out += fp[yy:yy + h, xx:xx + w, :] * t.grid[yy, xx, :]
    out *= tm_scale / (tw * th)
    return out


def template_match_backward(fm: FeatureMap, t: Template, tm_scale: float,
                            grad_out: np.ndarray):
    """Gradients of template_match wrt (feature grid, template grid, scale)."""
    th, tw = t.grid.shape[:2]
    top, bottom, left, right = _pad_offsets(th, tw)
    h, w, d = fm.grid.shape
    norm = 1.0 / (tw * th)
    fp = np.pad(fm.grid, ((top, bottom), (left, right), (0, 0)))
    g_fp = np.zeros_like(fp)
    g_t = np.zeros_like(t.grid)
    raw_dot = 0.0  # <grad_out, pre-scale output> for the scale gradient
    g_scaled = grad_out * (tm_scale * norm)
    for yy in range(th):
        for xx in range(tw):
            window = fp[yy:yy + h, xx:xx + w, :]
            g_t[yy, xx, :] = (grad_out * window).sum(axis=(0, 1)) * (tm_scale * norm)
            g_fp[yy:yy + h, xx:xx + w, :] += g_scaled * t.grid[yy, xx, :]
            raw_dot += float((grad_out * window * t.grid[yy, xx, :]).sum()) * norm
    g_f = g_fp[top:top + h, left:left + w, :]
    return g_f, g_t, raw_dot


def prototype_match(fm: FeatureMap, t: Template) -> np.ndarray:
    """Match against the average-pooled 1x1 prototype of the template."""
    _check_depths(fm, t)
    proto = t.grid.mean(axis=(0, 1))
    return fm.grid * proto


def prototype_match_backward(fm: FeatureMap, t: Template, grad_out: np.ndarray):
    proto = t.grid.mean(axis=(0, 1))
    g_f = grad_out * proto
    g_proto = (grad_out * fm.grid).sum(axis=(0, 1))
    g_t = np.broadcast_to(g_proto / (t.grid.shape[0] * t.grid.shape[1]),
                          t.grid.shape).copy()
    return g_f, g_t


def cosine_match(fm: FeatureMap, t: Template, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity between the flattened template and each same-footprint
    window of the feature map; (H, W, 1), zero where either vector is zero."""
    _check_depths(fm, t)
    th, tw = t.grid.shape[:2]
    top, bottom, left, right = _pad_offsets(th, tw)
    fp = np.pad(fm.grid, ((top, bottom), (left, right), (0, 0)))
    h, w, _ = fm.grid.shape
    dot = np.zeros((h, w), dtype=fm.grid.dtype)
    win_sq = np.zeros((h, w), dtype=fm.grid.dtype)
    for yy in range(th):
        for xx in range(tw):
            window = fp[yy:yy + h, xx:xx + w, :]
            dot += (window * t.grid[yy, xx, :]).sum(axis=2)
            win_sq += (window * window).sum(axis=2)
    t_norm = float(np.sqrt((t.grid * t.grid).sum()))
    denom = np.sqrt(win_sq) * t_norm
    out = np.where(denom > eps, dot / np.maximum(denom, eps), 0.0)
    return out[:, :, None].astype(fm.grid.dtype)


def cosine_match_backward(fm: FeatureMap, t: Template, grad_out: np.ndarray,
                          eps: float = 1e-12):
    """Gradients of cosine_match wrt the feature grid and the template grid."""
    th, tw = t.grid.shape[:2]
    top, bottom, left, right = _pad_offsets(th, tw)
    fp = np.pad(fm.grid, ((top, bottom), (left, right), (0, 0)))
    h, w, _ = fm.grid.shape
    dot = np.zeros((h, w), dtype=fm.grid.dtype)
    win_sq = np.zeros((h, w), dtype=fm.grid.dtype)
    for yy in range(th):
        for xx in range(tw):
            window = fp[yy:yy + h, xx:xx + w, :]
            dot += (window * t.grid[yy, xx, :]).sum(axis=2)
            win_sq += (window * window).sum(axis=2)
    t_sq = float((t.grid * t.grid).sum())
    t_norm = np.sqrt(t_sq)
    win_norm = np.sqrt(win_sq)
    denom = win_norm * t_norm
    live = denom > eps
    g = np.where(live, grad_out[:, :, 0], 0.0)
    inv_denom = np.where(live, 1.0 / np.maximum(denom, eps), 0.0)
    # d cos / d window = t/(|w||t|) - dot * w / (|w|^3 |t|)
    coef_t = g * inv_denom
    coef_w = np.where(live, g * dot / np.maximum(win_sq * denom, eps), 0.0)
    g_fp = np.zeros_like(fp)
    g_t = np.zeros_like(t.grid)
    # d cos / d t = w/(|w||t|) - dot * t / (|w| |t|^3)
    t_coef_sum = float(np.where(live, g * dot * inv_denom, 0.0).sum())
    for yy in range(th):
        for xx in range(tw):
            window = fp[yy:yy + h, xx:xx + w, :]
            g_fp[yy:yy + h, xx:xx + w, :] += coef_t[:, :, None] * t.grid[yy, xx, :] \
                - coef_w[:, :, None] * window
            g_t[yy, xx, :] = (coef_t[:, :, None] * window).sum(axis=(0, 1))
    if t_sq > eps:
        g_t -= t_coef_sum * t.grid / t_sq
    g_f = g_fp[top:top + h, left:left + w, :]
    return g_f, g_t


def build_head_input(fm: FeatureMap, match: Optional[np.ndarray],
                     variant: MatchVariant) -> np.ndarray:
    """Assemble the head input for a variant; concatenation order is
    [match; features] where both are present."""
    if variant == MatchVariant.F_ONLY:
        return fm.grid
    if match is None:
        raise ConfigError(f"variant {variant.value} needs a match map")
    if match.shape[:2] != fm.grid.shape[:2]:
        raise ConfigError(f"match map {match.shape[:2]} != feature map "
                          f"{fm.grid.shape[:2]} spatially")
    if variant == MatchVariant.TM_ONLY:
        return match
    return np.concatenate([match, fm.grid], axis=2)
