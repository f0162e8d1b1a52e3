"""Normalisation, LR/HR slice pairs and case-level splits."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .resample import bicubic_resample

NORMALISATION = 2.0 ** 16


def normalize(dwi):
    """Divide every volume of a case by 2**16 together, remembering the case maximum."""
    if np.any(dwi.volumes < 0):
        raise ValueError("intensities must be nonnegative")
    saved_max = float(dwi.volumes.max()) * dwi.scale if dwi.saved_max is None else dwi.saved_max
    return dwi.replace(volumes=dwi.volumes / NORMALISATION, saved_max=saved_max, scale=dwi.scale * NORMALISATION)


def restore(dwi):
    return dwi.replace(volumes=dwi.volumes * dwi.scale, scale=1.0)


@dataclass(frozen=True)
class SrPair:
    lr: np.ndarray
    hr: np.ndarray
    mask: np.ndarray        # HR-grid brain mask for this slice
    factor: int
    case: str
    volume: int
    slice: int
    bval: float

    @property
    def key(self):
        return (self.case, self.volume, self.slice)


def make_pairs(dwi, factor, case="case", a=-0.5):
    """Yield one :class:`SrPair` per axial slice per volume; slices outside the mask are skipped."""
    X, Y, Z, V = dwi.volumes.shape
    Xc, Yc = X - X % factor, Y - Y % factor
    for v in range(V):
        for z in range(Z):
            m = dwi.mask[:Xc, :Yc, z]
            if not m.any():
                continue
            hr = dwi.volumes[:Xc, :Yc, z, v]
            lr = bicubic_resample(hr, factor, "down", a=a)
            yield SrPair(lr, hr, m, factor, case, v, z, float(dwi.table.bvals[v]))


@dataclass(frozen=True)
class CaseSplit:
    train: tuple
    val: tuple
    test: tuple

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def apportion(n, ratios):
    """Largest-remainder apportionment of ``n`` items to ``ratios``; every part gets >= 1."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda k: sizes[k])
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


def make_split(cases, seed=0, ratios=(8, 2, 5), sizes=None):
    """Random case-level train/val/test split, deterministic under ``seed``."""
    cases = list(cases)
    if len(set(cases)) != len(cases):
        raise ConfigError("case identifiers must be unique")
    if len(cases) < len(ratios):
        raise ConfigError(f"need at least {len(ratios)} cases, got {len(cases)}")
    if sizes is None:
        sizes = apportion(len(cases), ratios)
    if sum(sizes) != len(cases) or min(sizes) < 1:
        raise ConfigError(f"split sizes {sizes} do not partition {len(cases)} cases")
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return CaseSplit(tuple(shuffled[:a]), tuple(shuffled[a:b]), tuple(shuffled[b:]))
