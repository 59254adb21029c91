"""Dense grid arithmetic with hand-written backward passes.

A feature grid is a numpy array shaped (H, W, D), row-major (y, x, channel).
Every layer used by the detector has a forward function and a matching
backward that accumulates parameter gradients in place, so training needs no
autodiff machinery. All ops preserve the dtype of their inputs; gradient
checks are meant to run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NonFiniteError

PAD = 1  # conv3x3 zero padding, fixed so spatial size is preserved at stride 1


# --------------------------------------------------------------------------- #
# Parameters                                                                   #
# --------------------------------------------------------------------------- #

@dataclass
class LayerParams:
    """One learnable tensor pair (weights + optional bias) with grad buffers."""

    name: str
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    grad_weights: np.ndarray = field(init=False)
    grad_bias: Optional[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = None if self.bias is None else np.zeros_like(self.bias)

    @property
    def param_count(self) -> int:
        return int(self.weights.size + (0 if self.bias is None else self.bias.size))

    def zero_grads(self) -> None:
        self.grad_weights[...] = 0.0
        if self.grad_bias is not None:
            self.grad_bias[...] = 0.0

    def tensors(self) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        """(suffix, value, grad) pairs for iteration by optimizer/checkpoint."""
        out = [("w", self.weights, self.grad_weights)]
        if self.bias is not None:
            out.append(("b", self.bias, self.grad_bias))
        return out


def conv3x3_params(name: str, c_in: int, c_out: int, rng: np.random.Generator,
                   dtype=np.float64) -> LayerParams:
    scale = np.sqrt(2.0 / (9 * c_in))  # He init, suits the LeakyReLU stacks
    w = rng.normal(0.0, scale, size=(3, 3, c_in, c_out)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return LayerParams(name, w, b)


def linear_params(name: str, c_in: int, c_out: int, rng: np.random.Generator,
                  dtype=np.float64) -> LayerParams:
    scale = np.sqrt(1.0 / c_in)
    w = rng.normal(0.0, scale, size=(c_in, c_out)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return LayerParams(name, w, b)


def scalar_params(name: str, value: float, dtype=np.float64) -> LayerParams:
    return LayerParams(name, np.array([value], dtype=dtype), None)


# --------------------------------------------------------------------------- #
# Convolution (3x3, zero padding 1, stride 1 or 2)                             #
# --------------------------------------------------------------------------- #

def _conv_out_size(n: int, stride: int) -> int:
    return (n + 2 * PAD - 3) // stride + 1


def _check_conv(x: np.ndarray, params: LayerParams) -> None:
    if x.ndim != 3:
        raise ConfigError(f"conv3x3 expects (H, W, D) input, got shape {x.shape}")
    if params.weights.shape[:2] != (3, 3) or params.weights.ndim != 4:
        raise ConfigError(f"{params.name}: weights must be (3, 3, c_in, c_out), "
                          f"got {params.weights.shape}")
    if params.weights.shape[2] != x.shape[2]:
        raise ConfigError(f"{params.name}: input depth {x.shape[2]} != "
                          f"kernel c_in {params.weights.shape[2]}")


def conv3x3_forward(x: np.ndarray, params: LayerParams, stride: int = 1) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation plus bias. Stride 1 keeps H,W."""
    _check_conv(x, params)
    h, w, c_in = x.shape
    c_out = params.weights.shape[3]
    ho, wo = _conv_out_size(h, stride), _conv_out_size(w, stride)
    xp = np.pad(x, ((PAD, PAD), (PAD, PAD), (0, 0)))
    out = np.empty((ho, wo, c_out), dtype=x.dtype)
    out[...] = params.bias
    for ky in range(3):
        for kx in range(3):
            win = xp[ky:ky + stride * (ho - 1) + 1:stride,
                     kx:kx + stride * (wo - 1) + 1:stride, :]
            out += (win.reshape(-1, c_in) @ params.weights[ky, kx]).reshape(ho, wo, c_out)
    return out


def conv3x3_backward(x: np.ndarray, params: LayerParams, grad_out: np.ndarray,
                     stride: int = 1) -> np.ndarray:
    """Accumulates grad_weights/grad_bias in place; returns grad wrt x."""
    _check_conv(x, params)
    h, w, c_in = x.shape
    c_out = params.weights.shape[3]
    ho, wo = _conv_out_size(h, stride), _conv_out_size(w, stride)
    if grad_out.shape != (ho, wo, c_out):
        raise ConfigError(f"{params.name}: grad_out shape {grad_out.shape} != "
                          f"expected {(ho, wo, c_out)}")
    xp = np.pad(x, ((PAD, PAD), (PAD, PAD), (0, 0)))
    gxp = np.zeros_like(xp)
    go = grad_out.reshape(-1, c_out)
    for ky in range(3):
        for kx in range(3):
            ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            win = xp[ys, xs, :].reshape(-1, c_in)
            params.grad_weights[ky, kx] += win.T @ go
            gxp[ys, xs, :] += (go @ params.weights[ky, kx].T).reshape(ho, wo, c_in)
    params.grad_bias += grad_out.sum(axis=(0, 1))
    return gxp[PAD:PAD + h, PAD:PAD + w, :]


# --------------------------------------------------------------------------- #
# Per-position linear layer                                                    #
# --------------------------------------------------------------------------- #

def _check_linear(x: np.ndarray, params: LayerParams) -> None:
    if params.weights.ndim != 2:
        raise ConfigError(f"{params.name}: weights must be (c_in, c_out)")
    if x.shape[-1] != params.weights.shape[0]:
        raise ConfigError(f"{params.name}: input depth {x.shape[-1]} != "
                          f"c_in {params.weights.shape[0]}")


def linear_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """out(y, x) = W . in(y, x) + b, applied per spatial position."""
    _check_linear(x, params)
    return x @ params.weights + params.bias


def linear_backward(x: np.ndarray, params: LayerParams, grad_out: np.ndarray) -> np.ndarray:
    _check_linear(x, params)
    c_in, c_out = params.weights.shape
    params.grad_weights += x.reshape(-1, c_in).T @ grad_out.reshape(-1, c_out)
    params.grad_bias += grad_out.reshape(-1, c_out).sum(axis=0)
    return grad_out @ params.weights.T


# --------------------------------------------------------------------------- #
# Activations                                                                  #
# --------------------------------------------------------------------------- #

def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0.0, grad_out, slope * grad_out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Takes the forward *output* y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


# --------------------------------------------------------------------------- #
# Bilinear resize (align-corners)                                              #
# --------------------------------------------------------------------------- #

def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, align-corners."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=dtype) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i0 + 1] += frac
    return m


def bilinear_resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Channel-wise bilinear interpolation; identity when sizes match."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be >= 1, got {(new_h, new_w)}")
    h, w, _ = x.shape
    if (new_h, new_w) == (h, w):
        return x.copy()
    ry = _resize_matrix(h, new_h, x.dtype)
    rx = _resize_matrix(w, new_w, x.dtype)
    tmp = np.tensordot(ry, x, axes=(1, 0))            # (new_h, w, d)
    return np.tensordot(rx, tmp, axes=(1, 1)).transpose(1, 0, 2)


def bilinear_resize_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of bilinear_resize back to an (h, w, d) grid."""
    new_h, new_w, _ = grad_out.shape
    if (new_h, new_w) == (h, w):
        return grad_out.copy()
    ry = _resize_matrix(h, new_h, grad_out.dtype)
    rx = _resize_matrix(w, new_w, grad_out.dtype)
    tmp = np.tensordot(ry.T, grad_out, axes=(1, 0))   # (h, new_w, d)
    return np.tensordot(rx.T, tmp, axes=(1, 1)).transpose(1, 0, 2)


# --------------------------------------------------------------------------- #
# AdamW                                                                        #
# --------------------------------------------------------------------------- #

class AdamW:
    """Decoupled weight-decay Adam over a list of LayerParams.

    step() consumes the accumulated gradients and zeroes them afterwards.
    """

    def __init__(self, params: Sequence[LayerParams], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        for p in self.params:
            for suffix, value, _ in p.tensors():
                key = f"{p.name}.{suffix}"
                self._m[key] = np.zeros_like(value)
                self._v[key] = np.zeros_like(value)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            for suffix, value, grad in p.tensors():
                key = f"{p.name}.{suffix}"
                m, v = self._m[key], self._v[key]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                m_hat = m / (1.0 - b1 ** t)
                v_hat = v / (1.0 - b2 ** t)
                value -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * value)
            p.zero_grads()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Moment buffers + step counter, for checkpointing."""
        out = {}
        for key, m in self._m.items():
            out[f"opt.m.{key}"] = m
            out[f"opt.v.{key}"] = self._v[key]
        out["opt.step"] = np.array([float(self.step_count)], dtype=np.float32)
        return out

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        for key in self._m:
            self._m[key][...] = tensors[f"opt.m.{key}"]
            self._v[key][...] = tensors[f"opt.v.{key}"]
        self.step_count = int(round(float(tensors["opt.step"][0])))


# --------------------------------------------------------------------------- #
# Finite-difference gradient oracle                                            #
# --------------------------------------------------------------------------- #

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: Dict[str, float]
    entries_checked: int

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_err)


def grad_check(loss_fn: Callable[[], float], params: Sequence[LayerParams],
               h: float = 1e-4, max_entries_per_tensor: int = 64,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn must zero nothing itself: it evaluates the loss and *accumulates*
    gradients into params. Relative error is measured per tensor against the
    largest gradient magnitude seen for that tensor, so exactly-zero gradients
    do not blow up the ratio.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grads()
    base = float(loss_fn())
    if not np.isfinite(base):
        raise NonFiniteError(f"loss is not finite: {base}")
    analytic = {}
    for p in params:
        for suffix, _, grad in p.tensors():
            analytic[f"{p.name}.{suffix}"] = grad.copy()

    per_param: Dict[str, float] = {}
    checked = 0
    for p in params:
        for suffix, value, grad in p.tensors():
            key = f"{p.name}.{suffix}"
            flat = value.reshape(-1)
            n = flat.size
            idx = np.arange(n) if n <= max_entries_per_tensor else \
                rng.choice(n, size=max_entries_per_tensor, replace=False)
            a = analytic[key].reshape(-1)
            diffs = np.zeros(idx.size, dtype=np.float64)
            numeric = np.zeros(idx.size, dtype=np.float64)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                numeric[k] = (lp - lm) / (2.0 * h)
                diffs[k] = abs(a[i] - numeric[k])
            scale = max(float(np.abs(a[idx]).max(initial=0.0)),
                        float(np.abs(numeric).max(initial=0.0)), 1e-12)
            per_param[key] = float(diffs.max(initial=0.0) / scale)
            checked += idx.size

    for p in params:
        p.zero_grads()
    worst = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(
        max_rel_err=max(per_param.values()) if per_param else 0.0,
        worst_param=worst, per_param=per_param, entries_checked=checked)
