"""Separable cubic-convolution resampling on a half-pixel (center-aligned) grid.

Output sample ``j`` of an axis resized from ``n_in`` to ``n_out`` sits at input
coordinate ``(j + 0.5) * n_in / n_out - 0.5``.  When shrinking, the kernel is
stretched by the factor (antialiasing) and each row of weights is renormalised.
Borders use half-sample symmetric reflection.
"""
from fractions import Fraction
from functools import lru_cache

import numpy as np

from ..errors import ShapeError


def cubic_kernel(x, a=-0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect(idx, n):
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


@lru_cache(maxsize=64)
def resample_matrix(n_in, n_out, a=-0.5, antialias=True):
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    M = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) / scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps - center) / stretch, a)
        w = w / w.sum()
        np.add.at(M[j], _reflect(taps, n_in), w)
    M.setflags(write=False)
    return M


def bicubic_resample(image, factor, direction="down", a=-0.5, antialias=True):
    """Resize a 2D image by ``factor`` (int or Fraction) in ``direction`` "down" or "up"."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2D image, got {image.shape}")
    factor = Fraction(factor)
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    if direction not in ("down", "up"):
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    ratio = 1 / factor if direction == "down" else factor
    out_shape = []
    for n in image.shape:
        m = n * ratio
        if m.denominator != 1:
            raise ShapeError(f"dim {n} not divisible by factor {factor}; crop first")
        out_shape.append(int(m))
    My = resample_matrix(image.shape[0], out_shape[0], a, antialias)
    Mx = resample_matrix(image.shape[1], out_shape[1], a, antialias)
    return My @ image @ Mx.T


def crop_to_multiple(image, factor):
    h, w = image.shape[:2]
    return image[: h - h % factor, : w - w % factor]
