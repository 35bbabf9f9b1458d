"""Domain types, cone-beam geometry and the matrix-free linear-map contract.

Array layout is flat and x-fastest everywhere: voxel ``(ix, iy, iz)`` lives at
``ix + nx * (iy + ny * iz)``, which is a C-ordered ``(nz, ny, nx)`` array.
Projections are detector-u fastest, i.e. ``(n_angles, nv, nu)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent shapes, geometry or parameters."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True).ravel()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar field.

    ``origin`` is the world position (mm) of the centre of the voxel grid's
    bounding box, so the box spans ``origin +/- dims * spacing / 2``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    data: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigurationError(f"invalid volume dims {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ConfigurationError(f"voxel spacing must be positive, got {self.spacing}")
        data = np.zeros(int(np.prod(dims))) if self.data is None else self.data
        data = _frozen(data)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ConfigurationError(
                f"data length {data.size} does not match dims {dims}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("volume contains non-finite values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return nz, ny, nx

    def as_array(self) -> np.ndarray:
        """Read-only ``(nz, ny, nx)`` view of the data."""
        return self.data.reshape(self.shape_zyx)

    def with_data(self, data) -> "Volume":
        return Volume(self.dims, self.spacing, self.origin, data)

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "Volume":
        """Build from a ``(nz, ny, nx)`` array."""
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise ConfigurationError("expected a 3D (nz, ny, nx) array")
        nz, ny, nx = arr.shape
        return cls((nx, ny, nz), spacing, origin, arr.ravel())


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam trajectory with a flat detector.

    The source sits at ``dso * (cos a, sin a, 0)`` for each angle ``a``; the
    detector centre is ``dsd`` further along the central ray. Detector ``u``
    runs along ``(-sin a, cos a, 0)`` and ``v`` along ``+z``.
    """

    dso: float
    dsd: float
    detector_shape: tuple[int, int]
    pixel_pitch: tuple[float, float]
    angles: np.ndarray
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        dso, dsd = float(self.dso), float(self.dsd)
        nu, nv = (int(n) for n in self.detector_shape)
        pu, pv = (float(p) for p in self.pixel_pitch)
        angles = _frozen(self.angles)
        if not dsd > dso > 0:
            raise ConfigurationError(f"need dsd > dso > 0, got dso={dso}, dsd={dsd}")
        if nu < 1 or nv < 1:
            raise ConfigurationError("detector needs at least one pixel per axis")
        if pu <= 0 or pv <= 0:
            raise ConfigurationError("pixel pitch must be positive")
        if angles.size == 0:
            raise ConfigurationError("angle list is empty")
        if not np.all(np.isfinite(angles)):
            raise ConfigurationError("non-finite projection angle")
        object.__setattr__(self, "dso", dso)
        object.__setattr__(self, "dsd", dsd)
        object.__setattr__(self, "detector_shape", (nu, nv))
        object.__setattr__(self, "pixel_pitch", (pu, pv))
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def n_rays(self) -> int:
        nu, nv = self.detector_shape
        return nu * nv * self.n_angles

    def with_angles(self, angles) -> "ConeBeamGeometry":
        return ConeBeamGeometry(self.dso, self.dsd, self.detector_shape,
                                self.pixel_pitch, angles, self.offset)

    def detector_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates (mm) along u and v, offsets included."""
        nu, nv = self.detector_shape
        pu, pv = self.pixel_pitch
        u = (np.arange(nu) - (nu - 1) / 2.0) * pu + self.offset[0]
        v = (np.arange(nv) - (nv - 1) / 2.0) * pv + self.offset[1]
        return u, v

    def frames(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-angle source position, detector centre and detector u-axis."""
        c, s = np.cos(self.angles), np.sin(self.angles)
        zero = np.zeros_like(c)
        src = np.stack([self.dso * c, self.dso * s, zero], axis=1)
        det = src - self.dsd * np.stack([c, s, zero], axis=1)
        eu = np.stack([-s, c, zero], axis=1)
        return src, det, eu

    def to_dict(self) -> dict:
        return {"dso": self.dso, "dsd": self.dsd,
                "detector_shape": list(self.detector_shape),
                "pixel_pitch": list(self.pixel_pitch),
                "offset": list(self.offset),
                "angles": [float(a) for a in self.angles]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(d["dso"], d["dsd"], tuple(d["detector_shape"]),
                   tuple(d["pixel_pitch"]), np.asarray(d["angles"], dtype=float),
                   tuple(d.get("offset", (0.0, 0.0))))


def circular_geometry(n_angles: int, dso: float, dsd: float, detector_shape,
                      pixel_pitch, span: float = 2 * np.pi, start: float = 0.0,
                      offset=(0.0, 0.0)) -> ConeBeamGeometry:
    """Equally spaced angles over ``span`` (endpoint excluded)."""
    angles = start + span * np.arange(n_angles) / n_angles
    return ConeBeamGeometry(dso, dsd, detector_shape, pixel_pitch, angles, offset)


@dataclass(frozen=True)
class ProjectionSet:
    geometry: ConeBeamGeometry
    data: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = self.geometry.n_rays
        data = np.zeros(n) if self.data is None else self.data
        data = _frozen(data)
        if data.size != n:
            raise ConfigurationError(
                f"projection data length {data.size} != nu*nv*n_angles = {n}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("projection data contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    def as_array(self) -> np.ndarray:
        """Read-only ``(n_angles, nv, nu)`` view."""
        nu, nv = self.geometry.detector_shape
        return self.data.reshape(self.geometry.n_angles, nv, nu)

    def with_data(self, data) -> "ProjectionSet":
        return ProjectionSet(self.geometry, data)


# ---------------------------------------------------------------------------
# vector helpers

def dot(a, b) -> float:
    """Euclidean inner product in float64.

    Summation is numpy's pairwise reduction over the flat elementwise product,
    which is deterministic for a given length and never multithreaded.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ConfigurationError(f"length mismatch in dot: {a.size} vs {b.size}")
    return float(np.sum(a * b))


def norm2(a) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    return float(np.sqrt(np.sum(a * a)))


# ---------------------------------------------------------------------------
# linear maps

class LinearMap:
    """A matrix-free linear operator given by a forward/adjoint pair.

    Parameters
    ----------
    domain_size, range_size : int
        Lengths of input and output vectors of :meth:`apply`.
    apply, apply_adjoint : callable
        ``apply(x)`` returns ``A x``; ``apply_adjoint(y)`` returns ``A^T y``.
        Both receive and return flat float64 arrays.
    """

    def __init__(self, domain_size: int, range_size: int,
                 apply: Callable[[np.ndarray], np.ndarray],
                 apply_adjoint: Callable[[np.ndarray], np.ndarray],
                 name: str = "LinearMap"):
        self.domain_size = int(domain_size)
        self.range_size = int(range_size)
        self._apply = apply
        self._apply_adjoint = apply_adjoint
        self.name = name

    def __repr__(self):
        return f"{self.name}({self.range_size}x{self.domain_size})"

    @property
    def shape(self) -> tuple[int, int]:
        return self.range_size, self.domain_size

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.domain_size:
            raise ConfigurationError(
                f"{self.name}: input length {x.size} != domain {self.domain_size}")
        return np.asarray(self._apply(x), dtype=np.float64).ravel()

    def apply_adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.range_size:
            raise ConfigurationError(
                f"{self.name}: adjoint input length {y.size} != range {self.range_size}")
        return np.asarray(self._apply_adjoint(y), dtype=np.float64).ravel()

    def to_dense(self) -> np.ndarray:
        """Matricize column by column from unit vectors. Small maps only."""
        cols = np.empty((self.range_size, self.domain_size))
        e = np.zeros(self.domain_size)
        for j in range(self.domain_size):
            e[j] = 1.0
            cols[:, j] = self.apply(e)
            e[j] = 0.0
        return cols


def identity_map(n: int) -> LinearMap:
    return LinearMap(n, n, lambda x: x.copy(), lambda y: y.copy(), name="Identity")


def matrix_map(mat) -> LinearMap:
    mat = np.asarray(mat, dtype=np.float64)
    return LinearMap(mat.shape[1], mat.shape[0], lambda x: mat @ x,
                     lambda y: mat.T @ y, name="Matrix")


def diagonal_map(diag) -> LinearMap:
    diag = np.asarray(diag, dtype=np.float64).ravel()
    return LinearMap(diag.size, diag.size, lambda x: diag * x,
                     lambda y: diag * y, name="Diagonal")


def compose(outer: LinearMap, inner: LinearMap) -> LinearMap:
    """``outer @ inner``."""
    if outer.domain_size != inner.range_size:
        raise ConfigurationError(f"cannot compose {outer!r} after {inner!r}")
    return LinearMap(inner.domain_size, outer.range_size,
                     lambda x: outer.apply(inner.apply(x)),
                     lambda y: inner.apply_adjoint(outer.apply_adjoint(y)),
                     name=f"{outer.name}*{inner.name}")


def stack_maps(blocks: Sequence[tuple[float, LinearMap]]) -> LinearMap:
    """Vertically stack ``scale * map`` blocks sharing one domain."""
    blocks = [(float(s), m) for s, m in blocks]
    if not blocks:
        raise ConfigurationError("stack_maps needs at least one block")
    n = blocks[0][1].domain_size
    for _, m in blocks:
        if m.domain_size != n:
            raise ConfigurationError(
                f"stacked blocks disagree on domain length: {m.domain_size} vs {n}")
    bounds = np.cumsum([0] + [m.range_size for _, m in blocks])

    def apply(x):
        return np.concatenate([s * m.apply(x) for s, m in blocks])

    def apply_adjoint(y):
        out = np.zeros(n)
        for (s, m), lo, hi in zip(blocks, bounds[:-1], bounds[1:]):
            out += s * m.apply_adjoint(y[lo:hi])
        return out

    return LinearMap(n, int(bounds[-1]), apply, apply_adjoint,
                     name="Stack[" + ",".join(m.name for _, m in blocks) + "]")


def adjoint_mismatch(op: LinearMap, rng: np.random.Generator, trials: int = 20) -> float:
    """Worst relative gap |<Ax,y> - <x,A^T y>| / (|<Ax,y>| + eps) over random pairs."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.domain_size)
        y = rng.standard_normal(op.range_size)
        lhs = dot(op.apply(x), y)
        rhs = dot(x, op.apply_adjoint(y))
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + np.finfo(float).eps))
    return worst


# ---------------------------------------------------------------------------
# raw + JSON sidecar IO

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json") if path.suffix != ".raw" \
        else path.with_suffix(".meta.json")


def save_volume(vol: Volume, path) -> Path:
    """Write ``<name>.raw`` (little-endian float32) plus ``<name>.meta.json``."""
    path = Path(path)
    vol.data.astype("<f4").tofile(path)
    meta = {"kind": "volume", "dims": list(vol.dims), "spacing": list(vol.spacing),
            "origin": list(vol.origin), "dtype": "float32", "order": "x-fastest"}
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("kind") != "volume":
        raise ConfigurationError(f"{path} is not a volume")
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    return Volume(tuple(meta["dims"]), tuple(meta["spacing"]), tuple(meta["origin"]), data)


def save_projections(proj: ProjectionSet, path) -> Path:
    path = Path(path)
    proj.data.astype("<f4").tofile(path)
    meta = {"kind": "projections", "geometry": proj.geometry.to_dict(),
            "dtype": "float32", "order": "u-fastest"}
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_projections(path) -> ProjectionSet:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("kind") != "projections":
        raise ConfigurationError(f"{path} is not a projection set")
    geom = ConeBeamGeometry.from_dict(meta["geometry"])
    return ProjectionSet(geom, np.fromfile(path, dtype="<f4").astype(np.float64))
