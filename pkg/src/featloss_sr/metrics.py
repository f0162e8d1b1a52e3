"""Masked image-quality scores: MAE, MSE, PSNR and SSIM, plus per-image [0, 1] rescaling."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    window: str = "global"        # "global" or "gaussian"
    size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if not (0 < self.k1 < 1 and 0 < self.k2 < 1):
            raise ValueError("k1, k2 must be small positive constants")
        if self.window not in ("global", "gaussian"):
            raise ValueError(f"unknown SSIM window {self.window!r}")


@dataclass
class MaskedImagePair:
    pred: np.ndarray
    target: np.ndarray
    mask: np.ndarray = None
    dynamic_range: float = 1.0

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.pred.shape != self.target.shape:
            raise ShapeError(f"pred {self.pred.shape} vs target {self.target.shape}")
        if self.mask is None:
            self.mask = np.ones(self.pred.shape, bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.pred.shape:
            raise ShapeError(f"mask {self.mask.shape} vs image {self.pred.shape}")

    def masked(self, need=1):
        n = int(self.mask.sum())
        if n < need:
            raise DataError(f"mask has {n} voxels, need at least {need}")
        return self.pred[self.mask], self.target[self.mask]


def mae_mse(pair):
    p, t = pair.masked()
    d = p - t
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


def psnr_from_mse(mse, dynamic_range=1.0):
    if dynamic_range <= 0:
        raise ValueError("dynamic range must be positive")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(dynamic_range ** 2 / mse)


def psnr(pair):
    return psnr_from_mse(mae_mse(pair)[1], pair.dynamic_range)


def _ssim_formula(mu_p, mu_t, var_p, var_t, cov, c1, c2):
    return ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / ((mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2))


def _gaussian_window(size, sigma):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pair, params=SsimParams()):
    """Global mode evaluates the SSIM formula once over the masked voxels (sample statistics,
    ddof=1); gaussian mode averages it over every window lying fully inside the mask."""
    R = pair.dynamic_range
    c1, c2 = (params.k1 * R) ** 2, (params.k2 * R) ** 2
    if params.window == "global":
        p, t = pair.masked(need=2)
        mu_p, mu_t = p.mean(), t.mean()
        dp, dt = p - mu_p, t - mu_t
        n1 = p.size - 1
        return float(_ssim_formula(mu_p, mu_t, (dp @ dp) / n1, (dt @ dt) / n1, (dp @ dt) / n1, c1, c2))
    from numpy.lib.stride_tricks import sliding_window_view

    if pair.pred.ndim != 2:
        raise ShapeError("windowed SSIM needs 2D images")
    k = params.size
    if min(pair.pred.shape) < k:
        raise ShapeError(f"image smaller than the {k}x{k} window")
    w = _gaussian_window(k, params.sigma)
    inside = sliding_window_view(pair.mask, (k, k)).all(axis=(-1, -2))
    if not inside.any():
        raise DataError("no SSIM window lies fully inside the mask")
    wp = sliding_window_view(pair.pred, (k, k))[inside]
    wt = sliding_window_view(pair.target, (k, k))[inside]
    mu_p = np.einsum("nij,ij->n", wp, w)
    mu_t = np.einsum("nij,ij->n", wt, w)
    var_p = np.einsum("nij,ij->n", wp * wp, w) - mu_p ** 2
    var_t = np.einsum("nij,ij->n", wt * wt, w) - mu_t ** 2
    cov = np.einsum("nij,ij->n", wp * wt, w) - mu_p * mu_t
    return float(np.mean(_ssim_formula(mu_p, mu_t, var_p, var_t, cov, c1, c2)))


def rescale_unit(image):
    """Map ``image`` to [0, 1]; returns ``(rescaled, (min, max), degenerate)``.

    A constant image maps to all zeros and is flagged degenerate.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        return (image - lo) / (hi - lo), (lo, hi), False
    return np.zeros_like(image), (lo, hi), True


@dataclass(frozen=True)
class SliceScores:
    mae: float
    mse: float
    psnr: float
    ssim: float


def score_slice(pred, target, mask=None, ssim_params=SsimParams()):
    """Evaluation protocol: rescale both images to [0, 1] independently, then score within
    the mask with R = 1.  Returns ``None`` for degenerate (constant) slices."""
    p, _, dp = rescale_unit(pred)
    t, _, dt = rescale_unit(target)
    if dp or dt:
        return None
    pair = MaskedImagePair(p, t, mask, 1.0)
    assert pair.dynamic_range == 1.0
    mae, mse = mae_mse(pair)
    return SliceScores(mae, mse, psnr_from_mse(mse, 1.0), ssim(pair, ssim_params))


def mean_fsum(values):
    """Order-independent mean via exactly rounded summation."""
    values = list(values)
    return math.fsum(values) / len(values) if values else math.nan
