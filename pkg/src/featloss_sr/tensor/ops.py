"""Forward and backward passes of the few dense-tensor operations the pipeline needs.

All tensors are 4D ``numpy`` arrays laid out as (batch, channel, height, width).
Inputs are never modified in place.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from . import backend


def _check4(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4D (n, c, h, w), got shape {x.shape}")


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _use_gemm(dtype):
    # GEMM is only allowed where it cannot break bit-compatibility with the
    # direct kernels: 64-bit always goes through the direct loops.
    return backend.get_mode() == "fast" and dtype == np.float32


def _validate_conv(x, w, b, stride, padding):
    _check4(x, "input")
    _check4(w, "kernel")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be square, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    k = w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, padding)
    ow = conv_output_size(x.shape[3], k, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"nonpositive output dims ({oh}, {ow})")
    return oh, ow


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation with zero padding, as in every CNN framework."""
    oh, ow = _validate_conv(x, w, b, stride, padding)
    dtype = np.result_type(x, w)
    x = x.astype(dtype, copy=False)
    w = np.ascontiguousarray(w, dtype=dtype)
    b = np.zeros(w.shape[0], dtype) if b is None else np.ascontiguousarray(b, dtype=dtype)
    xp = _pad(x, padding)
    k = w.shape[2]
    if _use_gemm(dtype):
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, cout)
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(out)
    out = np.empty((x.shape[0], w.shape[0], oh, ow), dtype=dtype)
    backend.kernels().conv_forward(xp, w, b, out, int(stride))
    return out


def conv2d_backward(grad_out, x, w, stride=1, padding=0, need_input=True, need_kernel=True):
    """Return ``(grad_input, grad_kernel, grad_bias)``; skipped terms are ``None``."""
    _check4(grad_out, "grad_out")
    oh, ow = _validate_conv(x, w, None, stride, padding)
    if grad_out.shape != (x.shape[0], w.shape[0], oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output")
    dtype = np.result_type(x, w, grad_out)
    g = np.ascontiguousarray(grad_out, dtype=dtype)
    w = np.ascontiguousarray(w, dtype=dtype)
    k = w.shape[2]
    n, cin, h, wd = x.shape
    gemm = _use_gemm(dtype)
    gx = gw = None
    if need_input:
        gxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=dtype)
        if gemm:
            cols = np.tensordot(g, w, axes=([1], [0]))  # (n, oh, ow, cin, k, k)
            cols = cols.transpose(0, 3, 1, 2, 4, 5)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + stride * (oh - 1) + 1:stride,
                        kx:kx + stride * (ow - 1) + 1:stride] += cols[..., ky, kx]
        else:
            backend.kernels().conv_backward_input(g, w, gxp, int(stride))
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        gx = np.ascontiguousarray(gx)
    if need_kernel:
        xp = _pad(x.astype(dtype, copy=False), padding)
        if gemm:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gw = np.ascontiguousarray(gw)
        else:
            gw = np.empty_like(w)
            backend.kernels().conv_backward_kernel(g, xp, gw, int(stride))
    gb = g.sum(axis=(0, 2, 3)) if need_kernel else None
    return gx, gw, gb


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2x2(x):
    """2x2/stride-2 max pooling; returns ``(out, argmax)`` with argmax in 0..3 (row-major)."""
    _check4(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got ({h}, {w})")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out, argmax, input_shape):
    n, c, h, w = input_shape
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def pixel_shuffle(x, r):
    """Channel block ``g*r*r + dy*r + dx`` becomes output channel ``g`` at offset (dy, dx)."""
    _check4(x, "input")
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    g = c // (r * r)
    return x.reshape(n, g, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, g, h * r, w * r)


def pixel_unshuffle(x, r):
    _check4(x, "input")
    n, g, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial dims ({hr}, {wr}) not divisible by r={r}")
    h, w = hr // r, wr // r
    return x.reshape(n, g, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, g * r * r, h, w)


def pixel_shuffle_backward(grad_out, r):
    return pixel_unshuffle(grad_out, r)


def upsample_nearest(x, r):
    return x.repeat(r, axis=2).repeat(r, axis=3)


def upsample_nearest_backward(grad_out, r):
    n, c, hr, wr = grad_out.shape
    return grad_out.reshape(n, c, hr // r, r, wr // r, r).sum(axis=(3, 5))
