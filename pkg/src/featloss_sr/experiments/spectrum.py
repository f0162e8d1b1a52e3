"""Periodic-artifact energy in an image's 2D spectrum.

For a pooling stride ``s`` on an ``H x W`` image the band is the set of DFT bins
within ``halfwidth`` bins (Chebyshev distance) of the lattice points
``(a*H/s, b*W/s)``, for integers a, b with (a, b) != (0, 0).  The ratio is the band
energy divided by the total energy after mean removal.
"""
import numpy as np

from ..errors import ShapeError


def _lattice_mask(shape, stride, halfwidth):
    H, W = shape
    mask = np.zeros(shape, bool)
    ys = [int(round(a * H / stride)) for a in range(stride)]
    xs = [int(round(b * W / stride)) for b in range(stride)]
    for ai, y in enumerate(ys):
        for bi, x in enumerate(xs):
            if ai == 0 and bi == 0:
                continue
            for dy in range(-halfwidth, halfwidth + 1):
                for dx in range(-halfwidth, halfwidth + 1):
                    mask[(y + dy) % H, (x + dx) % W] = True
    # keep the DC neighbourhood out: it carries the smooth content, not the artifact
    for dy in range(-halfwidth, halfwidth + 1):
        for dx in range(-halfwidth, halfwidth + 1):
            mask[dy % H, dx % W] = False
    return mask


def band_fraction(shape, stride, halfwidth=1):
    """Fraction of all DFT bins that fall inside the stride band (white-noise expectation)."""
    return float(_lattice_mask(tuple(shape), stride, halfwidth).mean())


def artifact_spectrum(image, strides, halfwidth=1):
    """Map each stride to the fraction of spectral energy in its lattice band."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2D image, got {image.shape}")
    strides = [int(s) for s in strides]
    if not strides or min(strides) < 2:
        raise ShapeError("strides must be integers >= 2")
    if min(image.shape) < 2 * max(strides):
        raise ShapeError(f"image {image.shape} too small for stride {max(strides)}")
    power = np.abs(np.fft.fft2(image - image.mean())) ** 2
    total = power.sum()
    out = {}
    for s in strides:
        band = power[_lattice_mask(image.shape, s, halfwidth)].sum()
        out[s] = float(band / total) if total > 0 else 0.0
    return out


def feature_gradient(extractor, tap, pred, target):
    """Gradient of the single-tap feature loss L_F(tap) with respect to ``pred`` (2D)."""
    from ..loss import LossConfig, loss_gradient

    cfg = LossConfig((tap,), {tap: 1.0}, pixel_term_enabled=False)
    p = np.asarray(pred, extractor.dtype)[None, None]
    t = np.asarray(target, extractor.dtype)[None, None]
    return loss_gradient(p, t, extractor, cfg)[0, 0]


def gradient_probe(seed, taps=(1, 4), size=64, stride=8, extractor_config=None, dtype=np.float32,
                   halfwidth=1):
    """Stride-``stride`` band ratio of the feature-loss input gradient for each tap.

    A fresh randomly initialised extractor and white-noise prediction/target images are
    drawn from ``seed``.  Returns ``{tap: ratio}``.
    """
    from ..features import ExtractorConfig, build_extractor

    config = extractor_config or ExtractorConfig.vgg16(taps=tuple(taps))
    ext = build_extractor(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(10_000 + seed)
    pred = rng.random((size, size))
    target = rng.random((size, size))
    return {t: artifact_spectrum(feature_gradient(ext, t, pred, target), [stride], halfwidth)[stride]
            for t in taps}
