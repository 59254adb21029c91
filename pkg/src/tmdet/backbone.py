"""Feature extraction: precomputed feature files or a small trainable stack.

Feature maps map to image pixels through a per-map stride: feature cell
(ix, iy) covers pixels [ix*stride, (ix+1)*stride) with its center at
(ix + 0.5) * stride. The "TMRF" dump format lets externally computed
backbone features (e.g. from a frozen ViT) be dropped in; the tiny trainable
backbone exists so the whole pipeline can be trained end to end on a CPU.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np

from . import numerics as nm
from .errors import ConfigError, FeatureFormatError
from .numerics import LayerParams

TMRF_MAGIC = b"TMRF"
TMRC_MAGIC = b"TMRC"
FORMAT_VERSION = 1

TINY_WIDTHS = (16, 32, 64)  # three stride-2 stages => total downsampling 8


@dataclass
class FeatureMap:
    grid: np.ndarray          # (H, W, D)
    stride: float             # image pixels per feature cell, per axis
    source: str = "precomputed"   # "precomputed" | "tiny-backbone"
    scale_id: int = 0

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def depth(self) -> int:
        return self.grid.shape[2]


@dataclass
class BackboneConfig:
    mode: str = "tiny"                 # "tiny" | "precomputed"
    projection_out: int = 512
    upsample_to: int = 128             # cells per axis after upsampling
    tiny_widths: Tuple[int, ...] = TINY_WIDTHS
    image_size: int = 1024

    def __post_init__(self):
        if self.projection_out <= 0:
            raise ConfigError("projection_out must be positive")


# --------------------------------------------------------------------------- #
# TMRF feature dumps                                                           #
# --------------------------------------------------------------------------- #

def save_features(path, fm: FeatureMap) -> None:
    h, w, d = fm.grid.shape
    with open(path, "wb") as f:
        f.write(TMRF_MAGIC)
        f.write(struct.pack("<IIIIf", FORMAT_VERSION, h, w, d, float(fm.stride)))
        f.write(np.ascontiguousarray(fm.grid, dtype="<f4").tobytes())


def load_features(path) -> FeatureMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TMRF_MAGIC:
            raise FeatureFormatError(f"bad magic {magic!r}, expected {TMRF_MAGIC!r}")
        header = f.read(20)
        if len(header) < 20:
            raise IOError("truncated TMRF header")
        version, h, w, d, stride = struct.unpack("<IIIIf", header)
        if version != FORMAT_VERSION:
            raise FeatureFormatError(f"unsupported TMRF version {version}")
        payload = f.read(h * w * d * 4)
        if len(payload) < h * w * d * 4:
            raise IOError(f"truncated TMRF payload: expected {h * w * d * 4} bytes, "
                          f"got {len(payload)}")
    grid = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return FeatureMap(grid=grid.astype(np.float32), stride=float(stride),
                      source="precomputed")


# --------------------------------------------------------------------------- #
# TMRC checkpoints (named float32 tensors)                                     #
# --------------------------------------------------------------------------- #

def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(TMRC_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            for dim in value.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_tensors(path) -> Dict[str, np.ndarray]:
    def read_exact(f: BinaryIO, n: int) -> bytes:
        data = f.read(n)
        if len(data) < n:
            raise IOError("truncated TMRC file")
        return data

    with open(path, "rb") as f:
        if read_exact(f, 4) != TMRC_MAGIC:
            raise FeatureFormatError("bad TMRC magic")
        version, count = struct.unpack("<II", read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise FeatureFormatError(f"unsupported TMRC version {version}")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(f, 2))
            name = read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(f, 4))
            dims = struct.unpack("<" + "I" * rank, read_exact(f, 4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = read_exact(f, 4 * n)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out


# --------------------------------------------------------------------------- #
# Tiny trainable backbone                                                      #
# --------------------------------------------------------------------------- #

def tiny_backbone_params(rng: np.random.Generator, widths: Tuple[int, ...] = TINY_WIDTHS,
                         dtype=np.float64) -> List[LayerParams]:
    params = []
    c_in = 3
    for i, width in enumerate(widths):
        params.append(nm.conv3x3_params(f"backbone.conv{i}", c_in, width, rng, dtype))
        c_in = width
    return params


def tiny_backbone_forward(image: np.ndarray, params: List[LayerParams],
                          slope: float = 0.01, cache: Optional[list] = None) -> FeatureMap:
    """Three stride-2 conv3x3 + LeakyReLU stages; stride = 2**len(stages)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H0, W0, 3) image, got {image.shape}")
    factor = 2 ** len(params)
    if image.shape[0] % factor or image.shape[1] % factor:
        raise ValueError(f"image dims {image.shape[:2]} not divisible by {factor}")
    x = image
    for p in params:
        pre = nm.conv3x3_forward(x, p, stride=2)
        if cache is not None:
            cache.append((x, pre))
        x = nm.leaky_relu(pre, slope)
    return FeatureMap(grid=x, stride=float(factor), source="tiny-backbone")


def tiny_backbone_backward(grad_out: np.ndarray, params: List[LayerParams],
                           cache: list, slope: float = 0.01) -> np.ndarray:
    g = grad_out
    for p, (x_in, pre) in zip(reversed(params), reversed(cache)):
        g = nm.leaky_relu_backward(pre, g, slope)
        g = nm.conv3x3_backward(x_in, p, g, stride=2)
    return g


# --------------------------------------------------------------------------- #
# Channel projection + resolution upsampling                                   #
# --------------------------------------------------------------------------- #

def project_and_upsample(fm: FeatureMap, proj: LayerParams, upsample_to: int,
                         cache: Optional[dict] = None) -> FeatureMap:
    """Linear channel projection followed by align-corners bilinear upsampling.

    The stride is rescaled by the resize ratio so box decoding stays in image
    pixels regardless of the working resolution.
    """
    if proj.weights.shape[0] != fm.depth:
        raise ConfigError(f"projection expects depth {proj.weights.shape[0]}, "
                          f"feature map has {fm.depth}")
    projected = nm.linear_forward(fm.grid, proj)
    if cache is not None:
        cache["input_grid"] = fm.grid
        cache["pre_resize_hw"] = projected.shape[:2]
    if upsample_to == fm.height and upsample_to == fm.width:
        out = projected
        stride = fm.stride
    else:
        out = nm.bilinear_resize(projected, upsample_to, upsample_to)
        stride = fm.stride * fm.height / upsample_to
    return FeatureMap(grid=out, stride=stride, source=fm.source, scale_id=fm.scale_id)


def project_and_upsample_backward(grad_out: np.ndarray, proj: LayerParams,
                                  cache: dict) -> np.ndarray:
    h, w = cache["pre_resize_hw"]
    g = grad_out
    if g.shape[:2] != (h, w):
        g = nm.bilinear_resize_backward(g, h, w)
    return nm.linear_backward(cache["input_grid"], proj, g)
