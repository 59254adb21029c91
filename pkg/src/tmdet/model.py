"""The full detector: parameters, forward pipeline and hand-written backprop.

One forward pass runs image -> (tiny backbone) -> projection/upsample ->
template extraction -> matching -> heads; training additionally builds the
target maps, evaluates both losses and chains every backward op in reverse.
The feature grid receives gradient from three places (the head concatenation,
the sliding correlation, and the template crop), which are summed before
flowing back into the projection and backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import backbone as bb
from . import head as hd
from . import loss as ls
from . import matching as mt
from . import numerics as nm
from . import template as tp
from .backbone import FeatureMap
from .boxes import BoxXYWH
from .errors import ConfigError
from .head import DecodeVariant
from .matching import MatchVariant
from .numerics import LayerParams

PRESENCE_BIAS_INIT = -2.0  # start near the positive-cell prior, not at 0.5


@dataclass
class ModelConfig:
    feature_depth: int = 64
    match_variant: MatchVariant = MatchVariant.CONCAT_TM
    decode_variant: DecodeVariant = DecodeVariant.FULL
    backbone_mode: str = "tiny"          # "tiny" | "precomputed"
    tiny_widths: Tuple[int, ...] = bb.TINY_WIDTHS
    input_depth: int = 256               # precomputed-feature depth
    upsample_to: int = 0                 # 0 = keep native resolution
    leaky_slope: float = 0.01
    margin_delta: float = ls.DEFAULT_MARGIN
    template_grad: bool = True           # let template extraction backprop into F
    freeze_backbone: bool = False
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_depth(self) -> int:
        return self.match_variant.head_depth(self.feature_depth)


@dataclass
class ForwardState:
    """Everything the backward pass needs from one forward run."""
    feature_map: FeatureMap
    template: tp.Template
    match: Optional[np.ndarray]
    head_in: np.ndarray
    reg_cache: hd.HeadCache
    pres_cache: hd.HeadCache
    probs: np.ndarray
    boxes: np.ndarray
    exemplar: BoxXYWH
    backbone_cache: Optional[list] = None
    proj_cache: Optional[dict] = None
    raw_features: Optional[FeatureMap] = None


@dataclass
class LossBreakdown:
    presence: float
    box: float

    @property
    def total(self) -> float:
        return ls.total_loss(self.presence, self.box)


class Model:
    """Parameter container plus the forward/backward pipeline."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        dt = cfg.np_dtype
        self.backbone_params: List[LayerParams] = []
        if cfg.backbone_mode == "tiny":
            self.backbone_params = bb.tiny_backbone_params(rng, cfg.tiny_widths, dt)
            proj_in = cfg.tiny_widths[-1]
        elif cfg.backbone_mode == "precomputed":
            proj_in = cfg.input_depth
        else:
            raise ConfigError(f"unknown backbone mode {cfg.backbone_mode!r}")
        self.proj = nm.linear_params("proj", proj_in, cfg.feature_depth, rng, dt)
        self.tm_scale = nm.scalar_params("tm_scale", 1.0, dt)
        hd_depth = cfg.head_depth
        self.reg_conv = nm.conv3x3_params("reg.conv", hd_depth, hd_depth, rng, dt)
        self.reg_lin = nm.linear_params("reg.lin", hd_depth, 4, rng, dt)
        self.pres_conv = nm.conv3x3_params("pres.conv", hd_depth, hd_depth, rng, dt)
        self.pres_lin = nm.linear_params("pres.lin", hd_depth, 1, rng, dt)
        self.pres_lin.bias[:] = PRESENCE_BIAS_INIT
        # zero output layer: decoding starts exactly at the exemplar box per
        # cell, which keeps the scaled-shift variants stable early on
        self.reg_lin.weights[...] = 0.0
        self.reg_lin.bias[:] = 0.0

    # ------------------------------------------------------------------ #
    # parameter bookkeeping                                               #
    # ------------------------------------------------------------------ #

    def params(self, trainable_only: bool = False) -> List[LayerParams]:
        head = [self.proj, self.tm_scale, self.reg_conv, self.reg_lin,
                self.pres_conv, self.pres_lin]
        if trainable_only and self.cfg.freeze_backbone:
            return head
        return self.backbone_params + head

    def param_count(self) -> int:
        return sum(p.param_count for p in self.params())

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grads()

    # ------------------------------------------------------------------ #
    # forward                                                             #
    # ------------------------------------------------------------------ #

    def extract_features(self, source: Union[np.ndarray, FeatureMap],
                         want_cache: bool = False):
        """Image or raw FeatureMap -> projected (and upsampled) FeatureMap."""
        backbone_cache: Optional[list] = [] if want_cache else None
        if isinstance(source, FeatureMap):
            raw = source
            if raw.grid.dtype != self.cfg.np_dtype:
                raw = replace(raw, grid=raw.grid.astype(self.cfg.np_dtype))
        else:
            if self.cfg.backbone_mode != "tiny":
                raise ConfigError("raw images need backbone_mode='tiny'")
            image = np.asarray(source, dtype=self.cfg.np_dtype)
            raw = bb.tiny_backbone_forward(image, self.backbone_params,
                                           self.cfg.leaky_slope, backbone_cache)
        proj_cache: Optional[dict] = {} if want_cache else None
        upsample_to = self.cfg.upsample_to or raw.height
        fm = bb.project_and_upsample(raw, self.proj, upsample_to, proj_cache)
        return fm, raw, backbone_cache, proj_cache

    def _match(self, fm: FeatureMap, template: tp.Template) -> Optional[np.ndarray]:
        v = self.cfg.match_variant
        if v == MatchVariant.F_ONLY:
            return None
        if v in (MatchVariant.CONCAT_TM, MatchVariant.TM_ONLY):
            return mt.template_match(fm, template, float(self.tm_scale.weights[0]))
        if v == MatchVariant.CONCAT_PM:
            return mt.prototype_match(fm, template)
        return mt.cosine_match(fm, template)

    def forward_on_features(self, fm: FeatureMap, exemplar: BoxXYWH) -> ForwardState:
        """Head-side pipeline on an already projected feature map."""
        if fm.depth != self.cfg.feature_depth:
            raise ConfigError(f"projected feature depth {fm.depth} != model depth "
                              f"{self.cfg.feature_depth}")
        template = tp.roi_align_extract(fm, exemplar)
        match = self._match(fm, template)
        head_in = mt.build_head_input(fm, match, self.cfg.match_variant)
        reg_cache = hd.regress(head_in, self.reg_conv, self.reg_lin,
                               self.cfg.leaky_slope)
        pres_cache, probs = hd.presence(head_in, self.pres_conv, self.pres_lin,
                                        self.cfg.leaky_slope)
        boxes = hd.decode_boxes(reg_cache.out, exemplar, fm.stride,
                                self.cfg.decode_variant)
        return ForwardState(feature_map=fm, template=template, match=match,
                            head_in=head_in, reg_cache=reg_cache,
                            pres_cache=pres_cache, probs=probs, boxes=boxes,
                            exemplar=exemplar)

    def forward(self, source: Union[np.ndarray, FeatureMap], exemplar: BoxXYWH,
                want_cache: bool = False) -> ForwardState:
        fm, raw, backbone_cache, proj_cache = self.extract_features(source, want_cache)
        state = self.forward_on_features(fm, exemplar)
        state.backbone_cache = backbone_cache
        state.proj_cache = proj_cache
        state.raw_features = raw
        return state

    # ------------------------------------------------------------------ #
    # training step: loss + full backward                                 #
    # ------------------------------------------------------------------ #

    def loss_and_grad(self, source: Union[np.ndarray, FeatureMap],
                      exemplar: BoxXYWH, gt_boxes: Sequence[BoxXYWH],
                      reduction: str = "mean",
                      grad_scale: float = 1.0) -> LossBreakdown:
        """Accumulates parameter gradients (scaled by grad_scale) in place."""
        state = self.forward(source, exemplar, want_cache=True)
        fm = state.feature_map
        targets = ls.extended_center_set(gt_boxes, fm.stride, fm.height, fm.width,
                                         self.cfg.margin_delta)
        lp, g_probs = ls.presence_loss(state.probs, targets, reduction)
        lb, g_boxes = ls.box_loss(state.boxes, targets, reduction)
        self.backward(state, g_probs * grad_scale, g_boxes * grad_scale)
        return LossBreakdown(presence=lp, box=lb)

    def backward(self, state: ForwardState, g_probs: np.ndarray,
                 g_boxes: np.ndarray) -> None:
        cfg = self.cfg
        fm = state.feature_map
        g_reg_out = hd.decode_backward(state.reg_cache.out, state.boxes, g_boxes,
                                       state.exemplar, fm.stride, cfg.decode_variant)
        g_head_in = hd.head_backward(state.reg_cache, self.reg_conv, self.reg_lin,
                                     g_reg_out, cfg.leaky_slope)
        g_logits = nm.sigmoid_backward(state.probs, g_probs)
        g_head_in += hd.head_backward(state.pres_cache, self.pres_conv,
                                      self.pres_lin, g_logits, cfg.leaky_slope)

        # split the head-input gradient back into match map and feature grid
        v = cfg.match_variant
        if v == MatchVariant.F_ONLY:
            g_match, g_f = None, g_head_in
        elif v == MatchVariant.TM_ONLY:
            g_match, g_f = g_head_in, np.zeros_like(fm.grid)
        else:
            depth = g_head_in.shape[2] - fm.depth
            g_match = g_head_in[..., :depth]
            g_f = g_head_in[..., depth:].copy()

        g_template = None
        if g_match is not None:
            if v in (MatchVariant.CONCAT_TM, MatchVariant.TM_ONLY):
                scale = float(self.tm_scale.weights[0])
                gf2, g_template, g_scale = mt.template_match_backward(
                    fm, state.template, scale, g_match)
                self.tm_scale.grad_weights[0] += g_scale
            elif v == MatchVariant.CONCAT_PM:
                gf2, g_template = mt.prototype_match_backward(fm, state.template,
                                                              g_match)
            else:
                gf2, g_template = mt.cosine_match_backward(fm, state.template,
                                                           g_match)
            g_f += gf2

        if g_template is not None and cfg.template_grad:
            g_f += tp.roi_align_backward(fm, state.exemplar, g_template)

        g_raw = bb.project_and_upsample_backward(g_f, self.proj, state.proj_cache)
        if cfg.backbone_mode == "tiny" and not cfg.freeze_backbone:
            bb.tiny_backbone_backward(g_raw, self.backbone_params,
                                      state.backbone_cache, cfg.leaky_slope)

    def smoothness_margin(self, source: Union[np.ndarray, FeatureMap],
                          exemplar: BoxXYWH,
                          gt_boxes: Sequence[BoxXYWH]) -> Tuple[float, int]:
        """(kink margin, positive-cell count) for a training case.

        The margin is the distance from the forward pass to the nearest
        non-smooth point (LeakyReLU zero crossings and gIoU corner ties).
        Gradient audits need it comfortably larger than the probe step.
        """
        state = self.forward(source, exemplar, want_cache=True)
        fm = state.feature_map
        margin = min(float(np.abs(state.reg_cache.pre_act).min()),
                     float(np.abs(state.pres_cache.pre_act).min()))
        if state.backbone_cache:
            for _, pre in state.backbone_cache:
                margin = min(margin, float(np.abs(pre).min()))
        targets = ls.extended_center_set(gt_boxes, fm.stride, fm.height, fm.width,
                                         self.cfg.margin_delta)
        pos = targets.presence > 0.5
        n_pos = int(pos.sum())
        if n_pos:
            margin = min(margin, ls.giou_kink_margin(state.boxes[pos],
                                                     targets.box_target[pos]))
        return margin, n_pos

    # ------------------------------------------------------------------ #
    # checkpointing                                                       #
    # ------------------------------------------------------------------ #

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for p in self.params():
            for suffix, value, _ in p.tensors():
                out[f"{p.name}.{suffix}"] = value
        cfg = self.cfg
        out["meta.schema"] = np.array([1.0], dtype=np.float32)
        out["meta.feature_depth"] = np.array([cfg.feature_depth], dtype=np.float32)
        out["meta.match_variant"] = np.array(
            [list(MatchVariant).index(cfg.match_variant)], dtype=np.float32)
        out["meta.decode_variant"] = np.array(
            [list(DecodeVariant).index(cfg.decode_variant)], dtype=np.float32)
        out["meta.backbone_mode"] = np.array(
            [0.0 if cfg.backbone_mode == "tiny" else 1.0], dtype=np.float32)
        out["meta.tiny_widths"] = np.array(cfg.tiny_widths, dtype=np.float32)
        out["meta.input_depth"] = np.array([cfg.input_depth], dtype=np.float32)
        out["meta.upsample_to"] = np.array([cfg.upsample_to], dtype=np.float32)
        out["meta.leaky_slope"] = np.array([cfg.leaky_slope], dtype=np.float32)
        out["meta.margin_delta"] = np.array([cfg.margin_delta], dtype=np.float32)
        return out

    def save(self, path, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
        tensors = self.state_tensors()
        if extra:
            tensors.update(extra)
        bb.save_tensors(path, tensors)

    def load_params(self, tensors: Dict[str, np.ndarray]) -> None:
        dt = self.cfg.np_dtype
        for p in self.params():
            for suffix, value, _ in p.tensors():
                key = f"{p.name}.{suffix}"
                if key not in tensors:
                    raise ConfigError(f"checkpoint is missing tensor {key}")
                if tensors[key].shape != value.shape:
                    raise ConfigError(f"{key}: checkpoint shape {tensors[key].shape} "
                                      f"!= model shape {value.shape}")
                value[...] = tensors[key].astype(dt)

    @staticmethod
    def config_from_tensors(tensors: Dict[str, np.ndarray],
                            dtype: str = "float32") -> ModelConfig:
        def scalar(key):
            return float(tensors[key][0])

        return ModelConfig(
            feature_depth=int(scalar("meta.feature_depth")),
            match_variant=list(MatchVariant)[int(scalar("meta.match_variant"))],
            decode_variant=list(DecodeVariant)[int(scalar("meta.decode_variant"))],
            backbone_mode="tiny" if scalar("meta.backbone_mode") == 0.0
            else "precomputed",
            tiny_widths=tuple(int(v) for v in tensors["meta.tiny_widths"]),
            input_depth=int(scalar("meta.input_depth")),
            upsample_to=int(scalar("meta.upsample_to")),
            leaky_slope=scalar("meta.leaky_slope"),
            margin_delta=scalar("meta.margin_delta"),
            dtype=dtype,
        )

    @classmethod
    def load(cls, path, dtype: str = "float32") -> Tuple["Model", Dict[str, np.ndarray]]:
        tensors = bb.load_tensors(path)
        cfg = cls.config_from_tensors(tensors, dtype)
        model = cls(cfg)
        model.load_params(tensors)
        return model, tensors
