"""Synthetic diffusion phantom built from the tensor signal model S = S0 * exp(-b g^T D g).

A case is an ellipsoidal "brain" with isotropic tissue, a fluid-filled ellipsoid and
two or more straight fiber bands, each with its own tensor.  Region boundaries are
soft (smoothstep ramps ``edge_width`` voxels either side) and tensors are blended linearly across them,
so every voxel's ground-truth tensor is still symmetric positive semidefinite.
Geometry is randomised per seed.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..qc import DwiVolumeSet, GradientTable


def hemisphere_directions(n, offset=0.0):
    """``n`` well-spread unit vectors on the upper hemisphere (Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    z = 1 - i / n
    phi = np.pi * (1 + 5 ** 0.5) * i + offset
    r = np.sqrt(1 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def default_table(n_b0=2, per_shell=(4, 4), shells=(1000.0, 2000.0)):
    total = sum(per_shell)
    dirs = hemisphere_directions(total)
    bvals = [0.0] * n_b0
    bvecs = [np.zeros(3)] * n_b0
    pos = 0
    for b, count in zip(shells, per_shell):
        for k in range(count):
            # interleave so each shell spans the hemisphere
            bvals.append(float(b))
            bvecs.append(dirs[(pos + k * len(shells)) % total] if len(shells) > 1 else dirs[k])
        pos += 1
    return GradientTable(np.array(bvals), np.array(bvecs))


@dataclass
class FiberSpec:
    eigenvalues: tuple = (1.7e-3, 0.3e-3, 0.3e-3)
    direction: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        self.eigenvalues = tuple(float(e) for e in self.eigenvalues)
        self.direction = tuple(float(c) for c in self.direction)


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 8)
    n_b0: int = 2
    shells: tuple = (1000.0, 2000.0)
    per_shell: tuple = (4, 4)
    tissue_diffusivity: float = 0.8e-3
    fluid_diffusivity: float = 3.0e-3
    fibers: list = field(default_factory=lambda: [
        FiberSpec((1.7e-3, 0.3e-3, 0.3e-3), (1.0, 0.0, 0.0)),
        FiberSpec((1.5e-3, 0.35e-3, 0.3e-3), (0.0, 1.0, 0.0)),
    ])
    s0: float = 3000.0
    s0_variation: float = 0.1
    edge_width: float = 1.5
    noise: float = 0.0           # Rician sigma as a fraction of s0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.shells = tuple(float(b) for b in self.shells)
        self.per_shell = tuple(int(c) for c in self.per_shell)
        self.fibers = [f if isinstance(f, FiberSpec) else FiberSpec(**f) for f in self.fibers]
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"phantom shape must be 3 positive ints, got {self.shape}")
        if len(self.fibers) < 2:
            raise ConfigError("phantom needs at least two fiber regions")
        if len(self.shells) != len(self.per_shell):
            raise ConfigError("shells and per_shell must have equal length")
        for f in self.fibers:
            if len(f.eigenvalues) != 3 or min(f.eigenvalues) < 0:
                raise ConfigError(f"fiber tensor is not positive semidefinite: {f.eigenvalues}")
            if np.linalg.norm(f.direction) == 0:
                raise ConfigError("fiber direction must be nonzero")
        if self.tissue_diffusivity < 0 or self.fluid_diffusivity < 0:
            raise ConfigError("diffusivities must be nonnegative")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")

    @property
    def n_volumes(self):
        return self.n_b0 + sum(self.per_shell)

    def table(self):
        return default_table(self.n_b0, self.per_shell, self.shells)

    def to_dict(self):
        d = asdict(self)
        d["shape"], d["shells"], d["per_shell"] = list(self.shape), list(self.shells), list(self.per_shell)
        for f in d["fibers"]:
            f["eigenvalues"], f["direction"] = list(f["eigenvalues"]), list(f["direction"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def fiber_tensor(spec):
    """Tensor with principal eigenvector along ``spec.direction``."""
    e1 = np.asarray(spec.direction, float)
    e1 = e1 / np.linalg.norm(e1)
    helper = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(e1, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    V = np.column_stack([e1, e2, e3])
    return V @ np.diag(spec.eigenvalues) @ V.T


def _soft(signed_distance, width):
    # C1 smoothstep over [-width, width]; exactly 0 or 1 outside the ramp
    t = np.clip((signed_distance + width) / (2 * width), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _smooth_field(rng, shape, scale):
    from scipy.ndimage import gaussian_filter

    f = gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


@dataclass
class Phantom:
    dwi: DwiVolumeSet
    tensors: np.ndarray     # (x, y, z, 3, 3)
    s0: np.ndarray          # (x, y, z)
    regions: np.ndarray     # (x, y, z) int: 0 background, 1 tissue, 2 fluid, 3.. fibers
    fractions: np.ndarray   # (x, y, z, k) blend weights of tissue, fluid, fibers (sum to 1)


def generate_phantom(spec, seed=0):
    rng = np.random.default_rng(seed)
    X, Y, Z = spec.shape
    x = np.arange(X)[:, None, None] - (X - 1) / 2
    y = np.arange(Y)[None, :, None] - (Y - 1) / 2
    z = (np.arange(Z)[None, None, :] - (Z - 1) / 2) * np.ones((1, 1, 1))
    zs = max(Z, 2)
    shape3 = (X, Y, Z)

    a, b = rng.uniform(0.36, 0.44, 2) * np.array([X, Y])
    c = zs * rng.uniform(0.9, 1.3)
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
    brain = _soft((1 - rho) * min(a, b), spec.edge_width) * np.ones(shape3)

    fa_, fb_ = a * rng.uniform(0.18, 0.28), b * rng.uniform(0.15, 0.25)
    cx, cy = rng.uniform(-0.2, 0.2, 2) * np.array([a, b])
    rho_f = np.sqrt(((x - cx) / fa_) ** 2 + ((y - cy) / fb_) ** 2 + (z / c) ** 2)
    fluid = _soft((1 - rho_f) * min(fa_, fb_), spec.edge_width) * np.ones(shape3)

    fibers = []
    for _ in spec.fibers:
        ang = rng.uniform(0, np.pi)
        off = rng.uniform(-0.35, 0.35) * min(a, b)
        half = rng.uniform(2.5, 5.0)
        tilt = rng.uniform(-0.4, 0.4)
        dist = np.abs(np.cos(ang) * x + np.sin(ang) * y - off - tilt * z)
        fibers.append(_soft(half - dist, spec.edge_width) * np.ones(shape3))

    # later regions overwrite earlier ones: fluid, then fibers in order
    frac = []
    remaining = np.ones(shape3)
    for wgt in [fluid] + fibers:
        f = wgt * remaining
        frac.append(f)
        remaining = remaining - f
    comp_D = [np.eye(3) * spec.fluid_diffusivity] + [fiber_tensor(f) for f in spec.fibers]
    D = remaining[..., None, None] * (np.eye(3) * spec.tissue_diffusivity)
    for f, Dr in zip(frac, comp_D):
        D = D + f[..., None, None] * Dr
    tissue = remaining

    s0 = spec.s0 * brain * (1 + spec.s0_variation * _smooth_field(rng, shape3, 4.0))
    s0 = s0 * (1 + 0.3 * frac[0])   # fluid is brighter at b=0
    table = spec.table()
    adc = np.einsum("ni,xyzij,nj->xyzn", table.bvecs, D, table.bvecs)
    signal = s0[..., None] * np.exp(-table.bvals * adc)
    if spec.noise > 0:
        sigma = spec.noise * spec.s0
        n1 = rng.standard_normal(signal.shape) * sigma
        n2 = rng.standard_normal(signal.shape) * sigma
        signal = np.sqrt((signal + n1) ** 2 + n2 ** 2)

    stack = np.stack([1 - brain, tissue * brain] + [f * brain for f in frac], axis=-1)
    regions = np.argmax(stack, axis=-1)
    mask = brain > 0.5
    D = np.where(mask[..., None, None], D, 0.0)
    dwi = DwiVolumeSet(signal, table, mask, saved_max=float(signal.max()), scale=1.0)
    fractions = np.stack([tissue] + frac, axis=-1)
    return Phantom(dwi, D, s0, regions, fractions)
