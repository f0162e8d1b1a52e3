import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from featloss_sr.errors import DataError
from featloss_sr.metrics import (MaskedImagePair, SsimParams, mae_mse, psnr, psnr_from_mse, rescale_unit,
                                 score_slice, ssim)


def test_mae_mse_examples():
    a = np.array([[0.0, 1.0]])
    assert mae_mse(MaskedImagePair(a, a)) == (0.0, 0.0)
    assert mae_mse(MaskedImagePair(a, a[:, ::-1])) == (1.0, 1.0)
    with pytest.raises(DataError):
        mae_mse(MaskedImagePair(a, a, np.zeros((1, 2), bool)))


def test_mae_mse_loop_oracle(rng):
    p, t = rng.random((2, 8, 8))
    m = np.zeros((8, 8), bool)
    m[:, :4] = True
    sa = sq = 0.0
    n = 0
    for y in range(8):
        for x in range(8):
            if m[y, x]:
                d = p[y, x] - t[y, x]
                sa += abs(d)
                sq += d * d
                n += 1
    mae, mse = mae_mse(MaskedImagePair(p, t, m))
    assert abs(mae - sa / n) < 1e-12 and abs(mse - sq / n) < 1e-12


def test_psnr_examples():
    assert abs(psnr_from_mse(0.01, 1.0) - 20.0) < 1e-12
    assert psnr_from_mse(0.0, 1.0) == math.inf
    assert abs(psnr_from_mse(0.04, 2.0) - 20.0) < 1e-12
    with pytest.raises(ValueError):
        psnr_from_mse(0.1, 0.0)


@given(st.floats(1e-8, 1e3), st.floats(1e-8, 1e3))
def test_psnr_strictly_decreasing(a, b):
    if a != b:
        lo, hi = sorted((a, b))
        assert psnr_from_mse(lo, 1.0) > psnr_from_mse(hi, 1.0)


def test_ssim_identity_and_offset(rng):
    a = rng.random((6, 6))
    assert ssim(MaskedImagePair(a, a)) == 1.0
    prev = None
    for c in (0.5, 0.1, 0.01, 0.0):
        v = ssim(MaskedImagePair(a + c, a))
        assert v <= 1.0 and (c == 0 or v < 1.0)
        if prev is not None:
            assert v > prev
        prev = v


def test_ssim_global_formula_oracle(rng):
    p, t = rng.random((2, 4, 4))
    x, y = p.ravel(), t.ravel()
    n = 16
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((xi - mx) ** 2 for xi in x) / (n - 1)
    vy = sum((yi - my) ** 2 for yi in y) / (n - 1)
    cxy = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y)) / (n - 1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expect = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert abs(ssim(MaskedImagePair(p, t), SsimParams(0.01, 0.03)) - expect) < 1e-12


@settings(max_examples=50)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s1 = ssim(MaskedImagePair(a, b))
    assert abs(s1 - ssim(MaskedImagePair(b, a))) < 1e-12
    assert -1 - 1e-12 <= s1 <= 1 + 1e-12


def test_ssim_needs_two_voxels():
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    with pytest.raises(DataError):
        ssim(MaskedImagePair(np.ones((3, 3)), np.ones((3, 3)), m))


def test_full_mask_equals_unmasked(rng):
    p, t = rng.random((2, 7, 7))
    pair = MaskedImagePair(p, t, np.ones((7, 7), bool))
    mse = np.mean((p - t) ** 2)
    assert mae_mse(pair) == (np.mean(np.abs(p - t)), mse)
    assert psnr(pair) == 10 * math.log10(1 / mse)


def test_windowed_ssim(rng):
    a = rng.random((20, 20))
    params = SsimParams(window="gaussian")
    assert abs(ssim(MaskedImagePair(a, a), params) - 1.0) < 1e-12
    b = a + 0.1 * rng.standard_normal(a.shape)
    assert ssim(MaskedImagePair(b, a), params) < 1.0
    m = np.zeros_like(a, bool)
    m[:5] = True
    with pytest.raises(DataError):
        ssim(MaskedImagePair(b, a, m), params)


def test_rescale_unit():
    r, (lo, hi), deg = rescale_unit(np.array([2.0, 6.0]))
    assert list(r) == [0.0, 1.0] and (lo, hi) == (2.0, 6.0) and not deg
    r, _, deg = rescale_unit(np.full((3, 3), 4.0))
    assert deg and np.all(r == 0)


@given(arrays(np.float64, (4, 4), elements=st.floats(-1e3, 1e3)))
def test_rescale_unit_range(a):
    r, _, deg = rescale_unit(a)
    if not deg:
        assert r.min() == 0.0 and r.max() == 1.0


def test_score_slice_protocol(rng):
    t = rng.random((8, 8)) * 100
    s = score_slice(t * 3 + 7, t)
    assert s.mse < 1e-25 and s.ssim > 1 - 1e-12
    assert score_slice(np.ones((4, 4)), t[:4, :4]) is None
