"""Dense tensor kernels for NHWC float arrays.

All operations here are pure functions of their inputs: no global state, no
hidden randomness (dropout takes an explicit generator).  Each forward kernel
has a matching backward that returns exact gradients for the same dtype, so
the whole stack can be run in float64 for finite-difference checks.

Shape convention is NHWC throughout: (batch, height, width, channels).
Convolutions are cross-correlations (no kernel flip), kernels are stored as
(kh, kw, c_in, c_out) and depthwise kernels as (kh, kw, c, 1).

SAME padding follows the ceil convention: the output spatial size is
ceil(in / stride) regardless of kernel size or dilation, with the total pad
split so that any odd pixel goes after (right/bottom).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError

PAD_SAME = "same"
PAD_VALID = "valid"


@dataclass
class ConvParams:
    """Parameters and hyperparameters of one convolution.

    kernel: (kh, kw, c_in, c_out) for standard conv, (kh, kw, c, 1) for
    depthwise.  bias is optional; BN-normalized layers run without one.
    """

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    dilation: int = 1
    padding: str = PAD_SAME


@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization state.

    gamma/beta are trainable; running_mean/running_var are EMA buffers
    updated in place during training-mode forward passes.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99


def _check_nhwc(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected NHWC rank-4 tensor, got shape {x.shape}")


def _same_pads(size: int, k: int, stride: int, dilation: int) -> tuple[int, int]:
    """Total SAME padding for one axis, split (before, after)."""
    out = -(-size // stride)
    span = (k - 1) * dilation + 1
    total = max((out - 1) * stride + span - size, 0)
    before = total // 2
    return before, total - before


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, dilation: int,
                   padding: str) -> tuple[int, int]:
    """Output spatial size of a convolution, without running it."""
    if padding == PAD_SAME:
        return -(-h // stride), -(-w // stride)
    if padding == PAD_VALID:
        oh = (h - ((kh - 1) * dilation + 1)) // stride + 1
        ow = (w - ((kw - 1) * dilation + 1)) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(
                f"valid conv of {kh}x{kw} dilation {dilation} does not fit input {h}x{w}")
        return oh, ow
    raise ShapeError(f"unknown padding mode {padding!r}")


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
               padding: str) -> tuple[np.ndarray, int, int]:
    """Zero-pad x for the requested mode; returns (padded, pad_top, pad_left)."""
    if padding == PAD_VALID:
        return x, 0, 0
    if padding != PAD_SAME:
        raise ShapeError(f"unknown padding mode {padding!r}")
    pt, pb = _same_pads(x.shape[1], kh, stride, dilation)
    pl, pr = _same_pads(x.shape[2], kw, stride, dilation)
    if pt == pb == pl == pr == 0:
        return x, 0, 0
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return xp, pt, pl


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             padding: str) -> tuple[np.ndarray, int, int]:
    """im2col view: (n, oh, ow, c, kh, kw) windows of the padded input."""
    xp, _, _ = _pad_input(x, kh, kw, stride, dilation, padding)
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    if xp.shape[1] < eh or xp.shape[2] < ew:
        raise ShapeError(
            f"conv window {eh}x{ew} does not fit padded input {xp.shape[1]}x{xp.shape[2]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (eh, ew), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, ::dilation, ::dilation]
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], kh, kw, stride, dilation, padding)
    return win, oh, ow


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Standard convolution; output (n, oh, ow, c_out)."""
    _check_nhwc(x, "conv2d")
    kh, kw, cin, cout = p.kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    win, oh, ow = _patches(x, kh, kw, p.stride, p.dilation, p.padding)
    # (n, oh, ow, c, kh, kw) -> (n*oh*ow, kh*kw*c) ordered to match kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    n = x.shape[0]
    y = cols.reshape(n * oh * ow, kh * kw * cin) @ p.kernel.reshape(kh * kw * cin, cout)
    y = y.reshape(n, oh, ow, cout)
    if p.bias is not None:
        y += p.bias
    return y


def conv2d_backward(grad: np.ndarray, x: np.ndarray, p: ConvParams
                    ) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Gradients of conv2d: (d_input, d_kernel, d_bias or None)."""
    kh, kw, cin, cout = p.kernel.shape
    n, h, w, _ = x.shape
    win, oh, ow = _patches(x, kh, kw, p.stride, p.dilation, p.padding)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    g2 = grad.reshape(n * oh * ow, cout)
    gk = (cols.reshape(n * oh * ow, kh * kw * cin).T @ g2).reshape(kh, kw, cin, cout)
    gb = grad.sum(axis=(0, 1, 2)) if p.bias is not None else None

    xp, pt, pl = _pad_input(x, kh, kw, p.stride, p.dilation, p.padding)
    gpad = np.zeros_like(xp)
    s, d = p.stride, p.dilation
    for i in range(kh):
        for j in range(kw):
            # every output pixel pulls from padded row i*d + y*s, col j*d + x*s
            contrib = g2 @ p.kernel[i, j].T
            gpad[:, i * d: i * d + (oh - 1) * s + 1: s,
                 j * d: j * d + (ow - 1) * s + 1: s, :] += contrib.reshape(n, oh, ow, cin)
    gx = gpad[:, pt: pt + h, pl: pl + w, :]
    return np.ascontiguousarray(gx), gk, gb


def depthwise_conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Per-channel convolution; kernel (kh, kw, c, 1), output keeps c channels."""
    _check_nhwc(x, "depthwise_conv2d")
    kh, kw, c, mult = p.kernel.shape
    if mult != 1:
        raise ShapeError(f"depthwise_conv2d: channel multiplier must be 1, got {mult}")
    if x.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input has {x.shape[3]} channels, kernel expects {c}")
    xp, _, _ = _pad_input(x, kh, kw, p.stride, p.dilation, p.padding)
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], kh, kw, p.stride, p.dilation, p.padding)
    k = p.kernel[..., 0]
    s, d = p.stride, p.dilation
    y = np.zeros((x.shape[0], oh, ow, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i * d: i * d + (oh - 1) * s + 1: s,
                    j * d: j * d + (ow - 1) * s + 1: s, :] * k[i, j]
    if p.bias is not None:
        y += p.bias
    return y


def depthwise_conv2d_backward(grad: np.ndarray, x: np.ndarray, p: ConvParams
                              ) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Gradients of depthwise_conv2d: (d_input, d_kernel, d_bias or None)."""
    kh, kw, c, _ = p.kernel.shape
    n, h, w, _ = x.shape
    xp, pt, pl = _pad_input(x, kh, kw, p.stride, p.dilation, p.padding)
    oh, ow = grad.shape[1], grad.shape[2]
    k = p.kernel[..., 0]
    s, d = p.stride, p.dilation
    gk = np.zeros_like(p.kernel)
    gpad = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            sl_h = slice(i * d, i * d + (oh - 1) * s + 1, s)
            sl_w = slice(j * d, j * d + (ow - 1) * s + 1, s)
            gk[i, j, :, 0] = (xp[:, sl_h, sl_w, :] * grad).sum(axis=(0, 1, 2))
            gpad[:, sl_h, sl_w, :] += grad * k[i, j]
    gx = gpad[:, pt: pt + h, pl: pl + w, :]
    gb = grad.sum(axis=(0, 1, 2)) if p.bias is not None else None
    return np.ascontiguousarray(gx), gk, gb


def batch_norm(x: np.ndarray, p: BatchNormParams, training: bool
               ) -> tuple[np.ndarray, Optional[dict]]:
    """Channelwise batch normalization.

    Training mode normalizes by batch statistics over (n, h, w), updates the
    running buffers in place by EMA, and returns the saved statistics needed
    for the backward pass.  Inference mode uses the running buffers and
    returns None for the saved state.
    """
    _check_nhwc(x, "batch_norm")
    c = x.shape[3]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, gamma has shape {p.gamma.shape}")
    if training:
        if x.shape[0] * x.shape[1] * x.shape[2] < 1:
            raise ShapeError("batch_norm: training mode needs at least one element per channel")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        m = p.momentum
        p.running_mean *= m
        p.running_mean += (1.0 - m) * mean
        p.running_var *= m
        p.running_var += (1.0 - m) * var
        inv = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x - mean) * inv
        return p.gamma * xhat + p.beta, {"mean": mean, "var": var, "inv": inv, "xhat": xhat}
    inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
    return p.gamma * ((x - p.running_mean) * inv) + p.beta, None


def batch_norm_backward(grad: np.ndarray, x: np.ndarray, p: BatchNormParams,
                        saved: Optional[dict]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batch_norm: (d_input, d_gamma, d_beta).

    With saved batch statistics the full training-mode formula is used; with
    saved=None the running statistics are treated as constants.
    """
    if saved is None:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (x - p.running_mean) * inv
        dgamma = (grad * xhat).sum(axis=(0, 1, 2))
        dbeta = grad.sum(axis=(0, 1, 2))
        return grad * (p.gamma * inv), dgamma, dbeta
    xhat, inv = saved["xhat"], saved["inv"]
    m = x.shape[0] * x.shape[1] * x.shape[2]
    dgamma = (grad * xhat).sum(axis=(0, 1, 2))
    dbeta = grad.sum(axis=(0, 1, 2))
    dxhat = grad * p.gamma
    # standard batch-norm backward, all reductions over (n, h, w)
    dx = (dxhat - dxhat.mean(axis=(0, 1, 2))
          - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)) / m) * inv
    return dx, dgamma, dbeta


def relu6(x: np.ndarray) -> np.ndarray:
    """Clip activation to [0, 6]."""
    return np.minimum(np.maximum(x, 0.0), 6.0)


def relu6_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient only where the input sat strictly inside (0, 6)."""
    return grad * ((x > 0.0) & (x < 6.0))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise residual addition; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def softmax(x: np.ndarray) -> np.ndarray:
    """Channelwise softmax over the last axis, numerically stabilized."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of softmax given its output y."""
    dot = (grad * y).sum(axis=-1, keepdims=True)
    return y * (grad - dot)


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability rate, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        return x
    if rng is None:
        raise ShapeError("dropout in training mode requires a random generator")
    return x * dropout_mask(x.shape, rate, rng, dtype=x.dtype)


# -- bilinear resize via per-axis interpolation matrices ----------------------
#
# Resizing one axis is a linear map, so it is expressed as a dense
# (out_len, in_len) matrix; forward is two tensordots and backward is the
# same contraction with the transposed matrices, which makes the adjoint
# exact to rounding.


@functools.lru_cache(maxsize=None)
def _interp_matrix(out_len: int, in_len: int) -> np.ndarray:
    """Bilinear interpolation matrix, half-pixel-center (align_corners=false)."""
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_len - 1)
    i1 = np.minimum(i0 + 1, in_len - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    mat = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.arange(out_len)
    np.add.at(mat, (rows, i0), w0)
    np.add.at(mat, (rows, i1), w1)
    return mat


def _apply_hw_matrices(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Contract height axis with mh and width axis with mw."""
    mh = mh.astype(x.dtype, copy=False)
    mw = mw.astype(x.dtype, copy=False)
    t = np.tensordot(mh, x, axes=(1, 1))        # (oh, n, w, c)
    t = np.tensordot(mw, t, axes=(1, 2))        # (ow, oh, n, c)
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize to (out_h, out_w) with half-pixel centers."""
    _check_nhwc(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: bad target size {out_h}x{out_w}")
    return _apply_hw_matrices(x, _interp_matrix(out_h, x.shape[1]),
                              _interp_matrix(out_w, x.shape[2]))


def resize_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_bilinear back to an (in_h, in_w) input."""
    return _apply_hw_matrices(grad, _interp_matrix(grad.shape[1], in_h).T,
                              _interp_matrix(grad.shape[2], in_w).T)


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Upsample both spatial axes by an integer factor."""
    if factor < 1:
        raise ShapeError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    return resize_bilinear(x, x.shape[1] * factor, x.shape[2] * factor)


def bilinear_upsample_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if grad.shape[1] % factor or grad.shape[2] % factor:
        raise ShapeError("bilinear_upsample_backward: gradient size not divisible by factor")
    return resize_bilinear_backward(grad, grad.shape[1] // factor, grad.shape[2] // factor)


def avg_pool_down(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping factor x factor average pooling; dims must divide."""
    _check_nhwc(x, "avg_pool_down")
    n, h, w, c = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avg_pool_down: factor {factor} does not divide input {h}x{w}")
    return x.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def avg_pool_down_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    g = np.repeat(np.repeat(grad, factor, axis=1), factor, axis=2)
    return g / (factor * factor)


@functools.lru_cache(maxsize=None)
def _bin_pool_matrix(bins: int, in_len: int) -> np.ndarray:
    """Averaging matrix for adaptive pooling into near-equal bins."""
    mat = np.zeros((bins, in_len), dtype=np.float64)
    for b in range(bins):
        lo = (b * in_len) // bins
        hi = ((b + 1) * in_len) // bins
        mat[b, lo:hi] = 1.0 / (hi - lo)
    return mat


def avg_pool_to_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Adaptive average pooling to a bins x bins grid."""
    _check_nhwc(x, "avg_pool_to_bins")
    if bins < 1 or bins > x.shape[1] or bins > x.shape[2]:
        raise ShapeError(
            f"avg_pool_to_bins: {bins} bins do not fit input {x.shape[1]}x{x.shape[2]}")
    return _apply_hw_matrices(x, _bin_pool_matrix(bins, x.shape[1]),
                              _bin_pool_matrix(bins, x.shape[2]))


def avg_pool_to_bins_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    return _apply_hw_matrices(grad, _bin_pool_matrix(grad.shape[1], in_h).T,
                              _bin_pool_matrix(grad.shape[2], in_w).T)


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; spatial dims must agree."""
    base = parts[0].shape[:3]
    for p in parts[1:]:
        if p.shape[:3] != base:
            raise ShapeError(
                f"concat_channels: spatial shapes differ, {p.shape[:3]} vs {base}")
    return np.concatenate(parts, axis=3)
