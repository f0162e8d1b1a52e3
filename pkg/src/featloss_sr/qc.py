"""Diffusion-specific quality control and a log-linear DTI fit.

Volumes are stored as (x, y, z, volume) arrays aligned with a :class:`GradientTable`.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 50.0


class GradientTableError(DataError):
    pass


@dataclass(frozen=True)
class GradientTable:
    bvals: np.ndarray
    bvecs: np.ndarray   # (N, 3); zero rows for b = 0

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if bvals.shape[0] != bvecs.shape[0]:
            raise GradientTableError(f"{bvals.shape[0]} b-values but {bvecs.shape[0]} vectors")
        if np.any(bvals < 0):
            raise GradientTableError("negative b-value")
        norms = np.linalg.norm(bvecs, axis=1)
        dw = bvals > 0
        if np.any(dw & (norms == 0)):
            raise GradientTableError("zero gradient vector for a diffusion-weighted entry")
        bvecs = bvecs.copy()
        bvecs[dw] /= norms[dw, None]
        bvecs[~dw] = 0.0
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.shape[0]

    @property
    def dw_indices(self):
        return np.flatnonzero(self.bvals > 0)

    @property
    def b0_indices(self):
        return np.flatnonzero(self.bvals == 0)

    def qvectors(self):
        return np.sqrt(self.bvals)[:, None] * self.bvecs

    def to_fsl(self):
        """Return (bvals_text, bvecs_text) in FSL row layout."""
        def fmt(v):
            return str(int(v)) if float(v).is_integer() else repr(float(v))
        bvals = " ".join(fmt(b) for b in self.bvals) + "\n"
        bvecs = "".join(" ".join(repr(float(c)) for c in self.bvecs[:, k]) + "\n" for k in range(3))
        return bvals, bvecs


def _parse_rows(text, what):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        row = []
        for col, tok in enumerate(tokens, start=1):
            try:
                row.append(float(tok))
            except ValueError:
                raise GradientTableError(f"{what}: non-numeric token {tok!r} at line {lineno}, column {col}") from None
        rows.append(row)
    return rows


def parse_gradient_table(bvals_text, bvecs_text, b0_threshold=B0_THRESHOLD):
    """Parse FSL ``bvals`` (one row of N) and ``bvecs`` (three rows of N)."""
    brows = _parse_rows(bvals_text, "bvals")
    if len(brows) == 1:
        bvals = brows[0]
    elif brows and all(len(r) == 1 for r in brows):
        bvals = [r[0] for r in brows]
    else:
        raise GradientTableError(f"bvals: expected a single row, found {len(brows)} rows")
    vrows = _parse_rows(bvecs_text, "bvecs")
    if len(vrows) != 3:
        raise GradientTableError(f"bvecs: expected 3 rows, found {len(vrows)}")
    for k, row in enumerate(vrows, start=1):
        if len(row) != len(bvals):
            raise GradientTableError(f"bvecs: row {k} has {len(row)} columns but bvals has {len(bvals)} entries")
    bvals = np.array(bvals)
    bvecs = np.array(vrows).T
    low = bvals < b0_threshold
    bvals = np.where(low, 0.0, bvals)
    bvecs[low] = 0.0
    return GradientTable(bvals, bvecs)


@dataclass
class DwiVolumeSet:
    volumes: np.ndarray          # (x, y, z, n_volumes)
    table: GradientTable
    mask: np.ndarray             # (x, y, z) bool
    saved_max: float = None
    scale: float = 1.0           # divisor applied by normalisation (1 = raw intensities)

    def __post_init__(self):
        if self.volumes.ndim != 4:
            raise ShapeError(f"volumes must be 4D (x, y, z, v), got {self.volumes.shape}")
        if self.volumes.shape[3] != len(self.table):
            raise ShapeError(f"{self.volumes.shape[3]} volumes but {len(self.table)} table entries")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.volumes.shape[:3]:
            raise ShapeError(f"mask {self.mask.shape} vs spatial dims {self.volumes.shape[:3]}")

    def replace(self, **kw):
        d = dict(volumes=self.volumes, table=self.table, mask=self.mask, saved_max=self.saved_max, scale=self.scale)
        d.update(kw)
        return DwiVolumeSet(**d)


def neighbor_index(table, i, antipodal=True):
    """Index of the diffusion-weighted entry whose q-vector sqrt(b)*g is closest to entry ``i``.

    With ``antipodal`` the comparison is against both +g(j) and -g(j).  Ties go to the
    smallest index; b=0 entries are never candidates.
    """
    n = len(table)
    if not 0 <= i < n:
        raise IndexError(f"entry {i} out of range 0..{n - 1}")
    if table.bvals[i] == 0:
        raise ValueError(f"entry {i} is a b=0 entry and has no diffusion neighbor")
    dw = table.dw_indices
    if dw.size < 2:
        raise ValueError("need at least two diffusion-weighted entries")
    q = table.qvectors()
    cand = dw[dw != i]
    d = np.linalg.norm(q[cand] - q[i], axis=1)
    if antipodal:
        d = np.minimum(d, np.linalg.norm(q[cand] + q[i], axis=1))
    return int(cand[np.argmin(d)])  # argmin returns the first (smallest j) on ties


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return None
    return float(a @ b) / den


@dataclass
class NeighborCorrelation:
    score: float
    terms: list = field(default_factory=list)     # (i, N(i), rho)
    skipped: list = field(default_factory=list)   # (i, N(i)) with undefined rho
    antipodal: bool = True


def correlation_terms(dwi, antipodal=True):
    dw = dwi.table.dw_indices
    if dw.size < 2:
        raise DataError("need at least two diffusion-weighted volumes")
    if not dwi.mask.any():
        raise DataError("empty mask")
    vox = dwi.volumes[dwi.mask].astype(np.float64)   # (n_voxels, n_volumes)
    terms, skipped = [], []
    for i in dw:
        j = neighbor_index(dwi.table, int(i), antipodal)
        rho = _pearson(vox[:, i], vox[:, j])
        if rho is None:
            skipped.append((int(i), j))
        else:
            terms.append((int(i), j, rho))
    if skipped:
        warnings.warn(f"{len(skipped)} neighbor pairs skipped: constant volume within mask")
    score = math.fsum(t[2] for t in terms) / len(terms) if terms else math.nan
    return NeighborCorrelation(score, terms, skipped, antipodal)


def neighboring_correlation(dwi, antipodal=True):
    """Mean Pearson correlation between each DWI and its most similar neighbor."""
    return correlation_terms(dwi, antipodal).score


def shells(table, tol=SHELL_TOLERANCE):
    """Group b>0 entries into shells; returns {nominal b: indices} sorted by b."""
    groups = []
    for i in table.dw_indices:
        b = table.bvals[i]
        for g in groups:
            if abs(g[0] - b) <= tol:
                g[1].append(int(i))
                break
        else:
            groups.append([b, [int(i)]])
    return {float(np.round(np.mean(table.bvals[idx]))): idx for _, idx in sorted(groups)}


def diffusion_contrast(dwi):
    """Mean masked b=0 signal divided by the mean masked signal of the highest shell.

    Local stand-in definition; not comparable with other tools' absolute values.
    """
    b0 = dwi.table.b0_indices
    sh = shells(dwi.table)
    if b0.size == 0 or not sh:
        raise DataError("diffusion contrast needs b=0 and diffusion-weighted volumes")
    if not dwi.mask.any():
        raise DataError("empty mask")
    vox = dwi.volumes[dwi.mask].astype(np.float64)
    hi = sh[max(sh)]
    num = float(vox[:, b0].mean())
    den = float(vox[:, hi].mean())
    if den == 0:
        raise DataError("highest shell has zero mean signal")
    return num / den


@dataclass
class DtiFitResult:
    tensors: np.ndarray      # (x, y, z, 3, 3)
    evals: np.ndarray        # (x, y, z, 3), descending, clamped >= 0
    evecs: np.ndarray        # (x, y, z, 3, 3), columns match evals
    fa: np.ndarray
    rd: np.ndarray
    md: np.ndarray
    s0: np.ndarray
    mask: np.ndarray
    clamped: int = 0


def design_matrix(table):
    b = table.bvals
    g = table.bvecs
    return np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])


def fractional_anisotropy(evals):
    l1, l2, l3 = evals[..., 0], evals[..., 1], evals[..., 2]
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 ** 2 + l2 ** 2 + l3 ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(0.5 * num / den)
    return np.where(den > 0, np.clip(fa, 0.0, 1.0), 0.0)


def dti_fit(dwi, floor_fraction=1e-6):
    """Ordinary least squares on ln S = ln S0 - b g^T D g for every masked voxel."""
    table = dwi.table
    B = design_matrix(table)
    if np.linalg.matrix_rank(B) < 7:
        raise DataError("gradient table does not span 6 non-collinear directions plus b=0")
    vox = dwi.volumes[dwi.mask].astype(np.float64)          # (m, n)
    ref = dwi.saved_max / dwi.scale if dwi.saved_max else float(vox.max(initial=0.0))
    floor = floor_fraction * ref if ref > 0 else floor_fraction
    low = vox < floor
    clamped = int(low.sum())
    if clamped:
        warnings.warn(f"{clamped} signal values clamped to {floor:g} before log")
    logs = np.log(np.where(low, floor, vox))
    coef, *_ = np.linalg.lstsq(B, logs.T, rcond=None)        # (7, m)
    dxx, dyy, dzz, dxy, dxz, dyz = coef[1:]
    D = np.stack([np.stack([dxx, dxy, dxz], -1), np.stack([dxy, dyy, dyz], -1),
                  np.stack([dxz, dyz, dzz], -1)], -2)         # (m, 3, 3)
    w, v = np.linalg.eigh(D)
    w, v = w[:, ::-1], v[:, :, ::-1]
    w = np.maximum(w, 0.0)
    shape = dwi.mask.shape

    def scatter(values, tail=()):
        out = np.zeros(shape + tail)
        out[dwi.mask] = values
        return out

    return DtiFitResult(
        tensors=scatter(D, (3, 3)), evals=scatter(w, (3,)), evecs=scatter(v, (3, 3)),
        fa=scatter(fractional_anisotropy(w)), rd=scatter((w[:, 1] + w[:, 2]) / 2),
        md=scatter(w.mean(axis=1)), s0=scatter(np.exp(coef[0])), mask=dwi.mask.copy(), clamped=clamped,
    )
