"""Procedural repeated-pattern images with exact box ground truth.

Each sample draws 1-3 patterns; a pattern is a motif (disc, ring, bigram of
two sub-elements, or texture patch) repeated on a layout (square / hex
lattice, a single frieze row, or non-overlapping scatter) with optional
position jitter and per-instance scale/color variation. Motifs paint strictly
inside their boxes, instances never overlap and never touch the image border,
so every annotation box exactly bounds its rendered instance. Reflected
bigrams (sub-elements swapped) are a different pattern id. All randomness
comes from the sample seed, so generation is byte-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BoxXYWH
from .errors import GenerationError

MIN_SIZE_FRACTION = 0.03   # box sides never below this fraction of the short side
EDGELESS_MODES = ("L", "R", "T", "B", "TL", "TR", "BL", "BR")


@dataclass
class PatternAnnotation:
    pattern_id: int
    exemplars: List[BoxXYWH]
    boxes: List[BoxXYWH]


@dataclass
class SampleAnnotation:
    image: str
    width: int
    height: int
    patterns: List[PatternAnnotation]
    edgeless: Optional[str] = None

    def pattern(self, pattern_id: int) -> PatternAnnotation:
        for p in self.patterns:
            if p.pattern_id == pattern_id:
                return p
        raise KeyError(f"no pattern {pattern_id} in {self.image}")


@dataclass
class GenSpec:
    seed: int = 0
    image_size: int = 256
    lattice: str = "square"          # square | hex | frieze_row | scattered
    motif: str = "disc"              # disc | ring | bigram | texture
    lattice_shape: Tuple[int, int] = (4, 4)
    n_instances: int = 8             # scattered / frieze_row instance count
    jitter: float = 0.05             # fraction of the lattice pitch
    scale_range: Tuple[float, float] = (1.0, 1.0)
    base_size_range: Tuple[float, float] = (0.09, 0.13)  # fraction of image size
    color_jitter: float = 0.03
    bg_noise: float = 0.01
    patterns_per_image: int = 1
    distractors: int = 0
    n_exemplars: int = 3
    pair_mode: str = "reflect"       # bigram pattern 1: "reflect" | "color"

    def __post_init__(self):
        if not (0.0 <= self.jitter < 0.5):
            raise ValueError(f"jitter must be in [0, 0.5), got {self.jitter}")
        if not (1 <= self.patterns_per_image <= 3):
            raise ValueError("patterns_per_image must be 1..3")
        if self.lattice not in ("square", "hex", "frieze_row", "scattered"):
            raise ValueError(f"unknown lattice {self.lattice!r}")
        if self.motif not in ("disc", "ring", "bigram", "texture"):
            raise ValueError(f"unknown motif {self.motif!r}")
        if self.base_size_range[0] * self.scale_range[0] < MIN_SIZE_FRACTION:
            raise ValueError("minimum instance size falls below the 3% rule")


# --------------------------------------------------------------------------- #
# Motif parameters and rendering                                               #
# --------------------------------------------------------------------------- #

@dataclass
class MotifParams:
    family: str
    colors: np.ndarray          # (k, 3) sub-element colors
    order: str = "ab"           # bigram sub-element order
    inner_frac: float = 0.55    # ring hole radius fraction
    tex_freq: Tuple[float, float] = (3.0, 5.0)
    tex_phase: Tuple[float, float] = (0.0, 0.0)

    def reflected(self) -> "MotifParams":
        return replace(self, order="ba" if self.order == "ab" else "ab")


def _distinct_color(rng: np.random.Generator, taken: List[np.ndarray],
                    min_dist: float = 0.45) -> np.ndarray:
    for _ in range(200):
        c = rng.uniform(0.45, 0.95, size=3)
        if all(np.abs(c - t).sum() > min_dist for t in taken):
            return c
    raise GenerationError("could not draw a distinct motif color")


def draw_motif_params(rng: np.random.Generator, family: str,
                      taken_colors: List[np.ndarray]) -> MotifParams:
    c1 = _distinct_color(rng, taken_colors)
    taken_colors.append(c1)
    if family == "bigram":
        c2 = _distinct_color(rng, taken_colors)
        taken_colors.append(c2)
        return MotifParams(family=family, colors=np.stack([c1, c2]))
    if family == "texture":
        return MotifParams(family=family, colors=c1[None, :],
                           tex_freq=(float(rng.uniform(2.5, 4.5)),
                                     float(rng.uniform(2.5, 4.5))),
                           tex_phase=(float(rng.uniform(0, 1)),
                                      float(rng.uniform(0, 1))))
    return MotifParams(family=family, colors=c1[None, :])


def _pixel_grid(box: BoxXYWH, size: int):
    x_lo = max(0, int(np.floor(box.x1)))
    x_hi = min(size, int(np.ceil(box.x2)))
    y_lo = max(0, int(np.floor(box.y1)))
    y_hi = min(size, int(np.ceil(box.y2)))
    xs = np.arange(x_lo, x_hi) + 0.5
    ys = np.arange(y_lo, y_hi) + 0.5
    return (slice(y_lo, y_hi), slice(x_lo, x_hi)), xs[None, :], ys[:, None]


def _disc_alpha(xs, ys, cx, cy, r):
    d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    return np.clip(r - d, 0.0, 1.0)


def _rect_alpha(xs, ys, x1, y1, x2, y2):
    ax = np.clip(np.minimum(xs + 0.5, x2) - np.maximum(xs - 0.5, x1), 0.0, 1.0)
    ay = np.clip(np.minimum(ys + 0.5, y2) - np.maximum(ys - 0.5, y1), 0.0, 1.0)
    return ax * ay


def _blend(img, window, alpha, color):
    img[window] = img[window] * (1.0 - alpha)[:, :, None] + alpha[:, :, None] * color


def render_motif(img: np.ndarray, box: BoxXYWH, params: MotifParams,
                 colors: np.ndarray) -> None:
    """Paint one instance; coverage is zero outside the instance box."""
    size = img.shape[0]
    window, xs, ys = _pixel_grid(box, size)
    if params.family == "disc":
        r = min(box.w, box.h) / 2.0
        _blend(img, window, _disc_alpha(xs, ys, box.cx, box.cy, r), colors[0])
    elif params.family == "ring":
        r = min(box.w, box.h) / 2.0
        outer = _disc_alpha(xs, ys, box.cx, box.cy, r)
        hole = _disc_alpha(xs, ys, box.cx, box.cy, r * params.inner_frac)
        _blend(img, window, np.minimum(outer, 1.0 - hole), colors[0])
    elif params.family == "bigram":
        # disc + square side by side; swapping the order reflects the motif
        r = box.h / 2.0
        left_cx = box.x1 + box.w * 0.25
        right_cx = box.x1 + box.w * 0.75
        disc_cx, sq_cx = (left_cx, right_cx) if params.order == "ab" \
            else (right_cx, left_cx)
        _blend(img, window, _disc_alpha(xs, ys, disc_cx, box.cy, r), colors[0])
        half = box.h / 2.0
        sq = _rect_alpha(xs, ys, sq_cx - half, box.cy - half, sq_cx + half,
                         box.cy + half)
        _blend(img, window, sq, colors[1])
    else:  # texture: box-local plaid so instances repeat the same pattern
        u = (xs - box.x1) / box.w
        v = (ys - box.y1) / box.h
        fx, fy = params.tex_freq
        px, py = params.tex_phase
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * u + px)) \
            * np.sin(2 * np.pi * (fy * v + py))
        alpha = _rect_alpha(xs, ys, box.x1, box.y1, box.x2, box.y2)
        tex_color = colors[0][None, None, :] * (0.55 + 0.45 * wave[:, :, None])
        img[window] = img[window] * (1.0 - alpha)[:, :, None] \
            + alpha[:, :, None] * tex_color


def _render_distractor(img: np.ndarray, rng: np.random.Generator,
                       box: BoxXYWH, color: np.ndarray) -> None:
    """A cross-shaped blob: visually unlike any motif family."""
    window, xs, ys = _pixel_grid(box, img.shape[0])
    bar = box.w / 4.0
    horiz = _rect_alpha(xs, ys, box.x1, box.cy - bar / 2, box.x2, box.cy + bar / 2)
    vert = _rect_alpha(xs, ys, box.cx - bar / 2, box.y1, box.cx + bar / 2, box.y2)
    _blend(img, window, np.maximum(horiz, vert), color)


# --------------------------------------------------------------------------- #
# Placement                                                                    #
# --------------------------------------------------------------------------- #

def _boxes_overlap(a: BoxXYWH, b: BoxXYWH, pad: float = 1.0) -> bool:
    return not (a.x2 + pad <= b.x1 or b.x2 + pad <= a.x1 or
                a.y2 + pad <= b.y1 or b.y2 + pad <= a.y1)


def _band(k: int, n_patterns: int, size: int) -> Tuple[float, float]:
    height = size / n_patterns
    return k * height, (k + 1) * height


def _lattice_centers(spec: GenSpec, rng: np.random.Generator,
                     y0: float, y1: float, max_w: float,
                     max_h: float) -> List[Tuple[float, float]]:
    size = spec.image_size
    if spec.lattice in ("square", "hex"):
        rows, cols = spec.lattice_shape
        pitch_x = size / cols
        pitch_y = (y1 - y0) / rows
        jx = spec.jitter * pitch_x
        jy = spec.jitter * pitch_y
        if max_w + 2 * jx > pitch_x or max_h + 2 * jy > pitch_y:
            raise GenerationError(
                f"lattice pitch ({pitch_x:.1f}, {pitch_y:.1f}) cannot fit "
                f"instances of size ({max_w:.1f}, {max_h:.1f}) with jitter")
        centers = []
        for r in range(rows):
            shift = pitch_x / 2.0 if (spec.lattice == "hex" and r % 2 == 1) else 0.0
            n_cols = cols - 1 if (spec.lattice == "hex" and r % 2 == 1) else cols
            for c in range(n_cols):
                cx = (c + 0.5) * pitch_x + shift
                cy = y0 + (r + 0.5) * pitch_y
                centers.append((cx + rng.uniform(-jx, jx),
                                cy + rng.uniform(-jy, jy)))
        return centers
    if spec.lattice == "frieze_row":
        n = spec.n_instances
        pitch_x = size / n
        jx = spec.jitter * pitch_x
        if max_w + 2 * jx > pitch_x or max_h > (y1 - y0):
            raise GenerationError("frieze row cannot fit the instances")
        cy = (y0 + y1) / 2.0
        return [((c + 0.5) * pitch_x + rng.uniform(-jx, jx),
                 cy + rng.uniform(-jx, jx)) for c in range(n)]
    return []  # scattered: handled with collision checks during placement


def _place_scattered(spec: GenSpec, rng: np.random.Generator, y0: float, y1: float,
                     sizes: List[Tuple[float, float]],
                     placed: List[BoxXYWH]) -> List[BoxXYWH]:
    out: List[BoxXYWH] = []
    margin = 2.0
    for w, h in sorted(sizes, key=lambda s: -s[0] * s[1]):  # big ones first
        ok = False
        for _ in range(400):
            cx = rng.uniform(margin + w / 2, spec.image_size - margin - w / 2)
            cy = rng.uniform(y0 + margin + h / 2, y1 - margin - h / 2)
            cand = BoxXYWH(cx, cy, w, h)
            if all(not _boxes_overlap(cand, other) for other in placed + out):
                out.append(cand)
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"could not scatter {len(sizes)} instances of up to "
                f"({max(s[0] for s in sizes):.0f}px) into the band")
    return out


# --------------------------------------------------------------------------- #
# Generation                                                                   #
# --------------------------------------------------------------------------- #

def _instance_sizes(spec: GenSpec, rng: np.random.Generator, n: int,
                    base_frac: float) -> List[Tuple[float, float]]:
    size = spec.image_size
    aspect = 2.2 if spec.motif == "bigram" else 1.0
    out = []
    for _ in range(n):
        scale = rng.uniform(*spec.scale_range)
        h = base_frac * size * scale
        h = max(h, MIN_SIZE_FRACTION * size)
        out.append((h * aspect, h))
    return out


def generate(spec: GenSpec) -> Tuple[np.ndarray, SampleAnnotation]:
    """Render one sample; returns (uint8 RGB image, annotation)."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    bg = rng.uniform(0.18, 0.32) + rng.uniform(-0.03, 0.03, size=3)
    img = np.tile(bg.clip(0.05, 0.5), (size, size, 1))
    if spec.bg_noise > 0:
        img = img + rng.uniform(-spec.bg_noise, spec.bg_noise, size=img.shape)

    taken_colors: List[np.ndarray] = []
    motif_params: List[MotifParams] = []
    for k in range(spec.patterns_per_image):
        if spec.motif == "bigram" and k == 1 and spec.pair_mode == "reflect":
            motif_params.append(motif_params[0].reflected())
        else:
            motif_params.append(draw_motif_params(rng, spec.motif, taken_colors))

    placed: List[BoxXYWH] = []
    patterns: List[PatternAnnotation] = []
    for k in range(spec.patterns_per_image):
        y0, y1 = _band(k, spec.patterns_per_image, size)
        base_frac = rng.uniform(*spec.base_size_range)
        if spec.lattice == "scattered":
            sizes = _instance_sizes(spec, rng, spec.n_instances, base_frac)
            boxes = _place_scattered(spec, rng, y0, y1, sizes, placed)
        else:
            if spec.lattice == "frieze_row":
                n_expected = spec.n_instances
            else:
                rows, cols = spec.lattice_shape
                n_expected = rows * cols
            sizes = _instance_sizes(spec, rng, n_expected, base_frac)
            max_w = max(s[0] for s in sizes)
            max_h = max(s[1] for s in sizes)
            centers = _lattice_centers(spec, rng, y0, y1, max_w, max_h)
            boxes = [BoxXYWH(cx, cy, sizes[i % len(sizes)][0],
                             sizes[i % len(sizes)][1])
                     for i, (cx, cy) in enumerate(centers)]
        for box in boxes:
            jitter = 1.0 + rng.uniform(-spec.color_jitter, spec.color_jitter)
            render_motif(img, box, motif_params[k],
                         np.clip(motif_params[k].colors * jitter, 0.0, 1.0))
        n_ex = min(spec.n_exemplars, len(boxes))
        picks = rng.choice(len(boxes), size=n_ex, replace=False)
        patterns.append(PatternAnnotation(
            pattern_id=k, exemplars=[boxes[i] for i in sorted(picks)],
            boxes=list(boxes)))
        placed.extend(boxes)

    for _ in range(spec.distractors):
        side = rng.uniform(0.05, 0.09) * size
        color = _distinct_color(rng, taken_colors, min_dist=0.3)
        for _ in range(100):
            cx = rng.uniform(side, size - side)
            cy = rng.uniform(side, size - side)
            cand = BoxXYWH(cx, cy, side, side)
            if all(not _boxes_overlap(cand, b) for b in placed):
                _render_distractor(img, rng, cand, color)
                placed.append(cand)
                break

    image8 = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    ann = SampleAnnotation(image="", width=size, height=size, patterns=patterns)
    return image8, ann


# --------------------------------------------------------------------------- #
# Edgeless crop transforms                                                     #
# --------------------------------------------------------------------------- #

def _crop_box(box: BoxXYWH, mode: str) -> BoxXYWH:
    w = box.w / 2.0 if ("L" in mode or "R" in mode) else box.w
    h = box.h / 2.0 if ("T" in mode or "B" in mode) else box.h
    cx = box.cx - box.w / 4.0 if "L" in mode else \
        box.cx + box.w / 4.0 if "R" in mode else box.cx
    cy = box.cy - box.h / 4.0 if "T" in mode else \
        box.cy + box.h / 4.0 if "B" in mode else box.cy
    return BoxXYWH(cx, cy, w, h)


def edgeless_transform(sample: SampleAnnotation, mode: str) -> SampleAnnotation:
    """Replace every exemplar and GT box by its half/quarter crop.

    The image is untouched; boxes stop coinciding with motif edges, which is
    the whole point. One transform per sample: modes do not compose.
    """
    if mode not in EDGELESS_MODES:
        raise ValueError(f"mode must be one of {EDGELESS_MODES}, got {mode!r}")
    if sample.edgeless is not None:
        raise ValueError(f"sample already carries edgeless mode "
                         f"{sample.edgeless!r}; transforms do not compose")
    patterns = [PatternAnnotation(
        pattern_id=p.pattern_id,
        exemplars=[_crop_box(b, mode) for b in p.exemplars],
        boxes=[_crop_box(b, mode) for b in p.boxes]) for p in sample.patterns]
    return SampleAnnotation(image=sample.image, width=sample.width,
                            height=sample.height, patterns=patterns,
                            edgeless=mode)


# --------------------------------------------------------------------------- #
# Named dataset recipes                                                        #
# --------------------------------------------------------------------------- #

def preset(name: str, seed: int = 0) -> List[GenSpec]:
    """Per-sample spec templates for the bundled benchmark recipes; the
    dataset writer cycles through the returned templates."""
    if name == "lattice-easy":
        # disc diameter >= 3.2 feature cells at stride 8 so every instance
        # owns at least one positive cell in the label rhombus
        return [GenSpec(seed=seed, image_size=256, lattice="square",
                        motif="disc", lattice_shape=(4, 4), jitter=0.06,
                        scale_range=(0.95, 1.08), base_size_range=(0.10, 0.125),
                        color_jitter=0.04, bg_noise=0.015)]
    if name == "lattice-mixed":
        return [GenSpec(seed=seed, image_size=256, lattice="square",
                        motif="disc", lattice_shape=(4, 4), jitter=0.08,
                        scale_range=(0.85, 1.15), base_size_range=(0.08, 0.12),
                        distractors=3, bg_noise=0.02),
                GenSpec(seed=seed, image_size=256, lattice="hex", motif="ring",
                        lattice_shape=(3, 3), jitter=0.08,
                        scale_range=(0.9, 1.1), base_size_range=(0.09, 0.12),
                        distractors=3, bg_noise=0.02),
                GenSpec(seed=seed, image_size=256, lattice="scattered",
                        motif="texture", n_instances=7,
                        scale_range=(0.9, 1.15), base_size_range=(0.09, 0.12),
                        bg_noise=0.02)]
    if name == "bigram":
        # reflection pairs and color pairs alternate: prototype pooling can
        # separate colors but not sub-element order, plain features neither.
        # Wide per-pattern base sizes with near-rigid instances make the
        # exemplar size genuinely informative for box decoding.
        common = dict(image_size=128, lattice="scattered", motif="bigram",
                      n_instances=3, patterns_per_image=2,
                      scale_range=(0.94, 1.06), base_size_range=(0.10, 0.14),
                      bg_noise=0.015, color_jitter=0.02)
        return [GenSpec(seed=seed, pair_mode="reflect", **common),
                GenSpec(seed=seed, pair_mode="color", **common)]
    raise ValueError(f"unknown preset {name!r}")
