"""Neural-network operations on :class:`~mmrb.tensor.Tensor`.

Convolution is cross-correlation implemented with an im2col view; its
backward scatters column gradients back one kernel offset at a time.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _lift

__all__ = ["relu", "softmax", "log_softmax", "conv2d", "maxpool2d", "flatten", "conv_output_size"]


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g, needs: (g * mask,))


def softmax(x) -> Tensor:
    """Row softmax over the last axis, computed with max-subtraction."""
    x = _lift(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), bw)


def log_softmax(x) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g, needs):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def flatten(x) -> Tensor:
    x = _lift(x)
    return x.reshape(x.shape[0], -1)


def conv_output_size(size: int, kernel: int, padding: int, stride: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is B×C×H×W, ``weight`` F×C×k×k and ``bias`` length F.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = weight.shape
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} channels, input has {C}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    Ho = conv_output_size(H, kh, padding, stride)
    Wo = conv_output_size(W, kw, padding, stride)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"non-positive output extent for input {H}x{W}, kernel {kh}x{kw}, padding {padding}")
    tensors = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (F,):
            raise ShapeError(f"bias shape {bias.shape} does not match {F} filters")
        tensors.append(bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Ho, Wo, C, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(F, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))
    xshape, pshape = x.shape, xp.shape

    def bw(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gx = gw = gb = None
        if needs[0]:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]] if padding else dxp
        if needs[1]:
            gw = (gmat.T @ cols).reshape(F, C, kh, kw)
        if len(needs) > 2 and needs[2]:
            gb = gmat.sum(axis=0)
        return (gx, gw, gb)[: len(tensors)]

    return Tensor._make(out, tuple(tensors), bw)


def maxpool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling. The gradient goes to the first maximum in row-major order."""
    x = _lift(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if window > H or window > W:
        raise ShapeError(f"window {window} larger than input {H}x{W}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def bw(g, needs):
        dx = np.zeros(shape, dtype=dtype)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.where(hit, g, 0)
        return (dx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw)
