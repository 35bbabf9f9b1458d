"""Synthetic volumes and simulated scans."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ConeBeamGeometry, ConfigurationError, ProjectionSet, Volume
from .projector import project_forward

# Ellipsoids in normalised [-1, 1]^3 coordinates:
# (value, semi-axes a b c, centre x y z, rotation about z in degrees).
# Values are additive; the result spans [0, 1] with soft tissue at 0.2.
SHEPP_LOGAN_3D = (
    (1.0, (0.6900, 0.920, 0.810), (0.00, 0.0000, 0.00), 0.0),
    (-0.8, (0.6624, 0.874, 0.780), (0.00, -0.0184, 0.00), 0.0),
    (-0.2, (0.1100, 0.310, 0.220), (0.22, 0.0000, 0.00), -18.0),
    (-0.2, (0.1600, 0.410, 0.280), (-0.22, 0.0000, 0.00), 18.0),
    (0.1, (0.2100, 0.250, 0.410), (0.00, 0.3500, -0.15), 0.0),
    (0.1, (0.0460, 0.046, 0.050), (0.00, 0.1000, 0.25), 0.0),
    (0.1, (0.0460, 0.046, 0.050), (0.00, -0.1000, 0.25), 0.0),
    (0.1, (0.0460, 0.023, 0.050), (-0.08, -0.6050, 0.00), 0.0),
    (0.1, (0.0230, 0.023, 0.020), (0.00, -0.6060, 0.00), 0.0),
    (0.1, (0.0230, 0.046, 0.020), (0.06, -0.6050, 0.00), 0.0),
)

SOFT_TISSUE = 0.2
# fixed so "head-like" is one deterministic object regardless of experiment seed
_TEXTURE_SEED = 20240611
_TEXTURE_BLOBS = 48


@dataclass(frozen=True)
class Insert:
    """Additive block inserted on top of the base phantom.

    ``size`` is the edge length in voxels for cubes (scalar or per-axis) and
    ``(diameter, length)`` for cylinders, whose axis runs along ``axis``.
    """

    shape: str
    center: tuple[int, int, int]
    size: Sequence[int] | int
    intensity: float
    axis: str = "z"

    def voxel_mask(self, dims) -> np.ndarray:
        """Boolean ``(nz, ny, nx)`` support; raises if it leaves the volume."""
        nx, ny, nz = dims
        c = np.asarray(self.center, dtype=int)
        if self.shape == "cube":
            edge = np.broadcast_to(np.asarray(self.size, dtype=int), (3,))
            lo = c - edge // 2
            hi = lo + edge
            _check_bounds(lo, hi, dims)
            mask = np.zeros((nz, ny, nx), dtype=bool)
            mask[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] = True
            return mask
        if self.shape == "cylinder":
            diameter, length = (int(s) for s in np.broadcast_to(np.asarray(self.size), (2,)))
            ax = "xyz".index(self.axis)
            lo = c - diameter // 2
            hi = lo + diameter
            lo[ax] = c[ax] - length // 2
            hi[ax] = lo[ax] + length
            _check_bounds(lo, hi, dims)
            iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
            pos = (ix, iy, iz)
            radial = [k for k in range(3) if k != ax]
            r = diameter / 2.0
            centre = c - 0.5 * ((diameter + 1) % 2)
            d2 = sum((pos[k] - centre[k]) ** 2 for k in radial)
            along = (pos[ax] >= lo[ax]) & (pos[ax] < hi[ax])
            return (d2 <= r * r) & along
        raise ConfigurationError(f"unknown insert shape {self.shape!r}")


def _check_bounds(lo, hi, dims):
    if np.any(lo < 0) or np.any(hi > np.asarray(dims)):
        raise ConfigurationError(f"insert spans voxels {lo.tolist()}..{(hi - 1).tolist()}, "
                                 f"outside volume {tuple(dims)}")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "head-like"
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    inserts: tuple[Insert, ...] = ()
    intensity: float = 1.0

    def without_inserts(self) -> "PhantomSpec":
        return PhantomSpec(self.kind, self.dims, self.spacing, (), self.intensity)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        inserts = tuple(
            Insert(i["shape"], tuple(i["center"]), i["size"], float(i["intensity"]),
                   i.get("axis", "z"))
            for i in d.get("inserts", []))
        dims = d.get("dims", (64, 64, 64))
        if np.isscalar(dims):
            dims = (dims,) * 3
        spacing = d.get("spacing", (1.0, 1.0, 1.0))
        if np.isscalar(spacing):
            spacing = (spacing,) * 3
        return cls(d.get("kind", "head-like"), tuple(int(n) for n in dims),
                   tuple(float(s) for s in spacing), inserts, float(d.get("intensity", 1.0)))


def normalized_grid(dims):
    """Voxel-centre coordinates in (-1, 1), each of shape ``(nz, ny, nx)``."""
    nx, ny, nz = dims
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in (nx, ny, nz)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return x, y, z


def ellipsoid_mask(x, y, z, axes, centre, phi_deg):
    cphi, sphi = np.cos(np.radians(phi_deg)), np.sin(np.radians(phi_deg))
    dx, dy, dz = x - centre[0], y - centre[1], z - centre[2]
    xr = cphi * dx + sphi * dy
    yr = -sphi * dx + cphi * dy
    return (xr / axes[0]) ** 2 + (yr / axes[1]) ** 2 + (dz / axes[2]) ** 2 <= 1.0


def _texture_blobs():
    rng = np.random.default_rng(_TEXTURE_SEED)
    blobs = []
    while len(blobs) < _TEXTURE_BLOBS:
        centre = rng.uniform(-0.55, 0.55, size=3) * np.array([1.0, 1.2, 1.0])
        # keep blobs inside the brain ellipsoid
        if np.sum((centre / np.array([0.6, 0.8, 0.7])) ** 2) > 1.0:
            continue
        axes = rng.uniform(0.025, 0.08, size=3)
        value = rng.choice([-1.0, 1.0]) * rng.uniform(0.02, 0.06)
        blobs.append((value, tuple(axes), tuple(centre), float(rng.uniform(0, 180))))
    return tuple(blobs)


def _compose(table, dims) -> np.ndarray:
    x, y, z = normalized_grid(dims)
    out = np.zeros(x.shape)
    for value, axes, centre, phi in table:
        out[ellipsoid_mask(x, y, z, axes, centre, phi)] += value
    return out


def make_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic phantom in [0, 1]; inserts are added, then clamped."""
    dims = tuple(int(n) for n in spec.dims)
    nx, ny, nz = dims
    if spec.kind == "uniform":
        arr = np.full((nz, ny, nx), float(spec.intensity))
    elif spec.kind == "shepp3d":
        arr = _compose(SHEPP_LOGAN_3D, dims)
    elif spec.kind == "head-like":
        arr = _compose(SHEPP_LOGAN_3D + _texture_blobs(), dims)
    else:
        raise ConfigurationError(f"unknown phantom kind {spec.kind!r}")
    arr = np.clip(arr, 0.0, 1.0)
    if spec.inserts:
        for ins in spec.inserts:
            arr = arr + ins.intensity * ins.voxel_mask(dims)
        arr = np.clip(arr, 0.0, 1.0)
    return Volume(dims, spec.spacing, (0.0, 0.0, 0.0), arr.ravel())


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma_rel: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if self.sigma_rel < 0:
            raise ConfigurationError("noise sigma must be non-negative")


def simulate_scan(vol: Volume, geom: ConeBeamGeometry, noise: Optional[NoiseModel] = None,
                  seed: int = 0) -> ProjectionSet:
    """Noise-free line integrals, plus Gaussian noise of std ``sigma_rel * max(b)``."""
    noise = noise or NoiseModel()
    clean = project_forward(vol, geom)
    if noise.kind == "none" or noise.sigma_rel == 0.0:
        return clean
    rng = np.random.default_rng(seed)
    sigma = noise.sigma_rel * float(np.max(clean.data))
    return clean.with_data(clean.data + sigma * rng.standard_normal(clean.size))


def subsample_indices(n_angles: int, n_keep: int) -> np.ndarray:
    if not 1 <= n_keep <= n_angles:
        raise ConfigurationError(f"n_keep={n_keep} outside 1..{n_angles}")
    return (np.arange(n_keep) * n_angles) // n_keep


def subsample_angles(proj: ProjectionSet, n_keep: int) -> ProjectionSet:
    """Keep ``n_keep`` views spread uniformly over the original angle list."""
    geom = proj.geometry
    keep = subsample_indices(geom.n_angles, n_keep)
    sub = geom.with_angles(geom.angles[keep])
    return ProjectionSet(sub, proj.as_array()[keep].ravel())
