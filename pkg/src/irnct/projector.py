"""Cone-beam forward projection and its exact adjoint.

The ray tracer comes from the compiled ``_siddon`` extension when it is
importable, otherwise from the numpy implementation in ``_siddon_py``. Set
``IRNCT_BACKEND=python`` to force the fallback and ``IRNCT_NUM_THREADS`` to
control the compiled kernel's thread count (default 1, which makes the
adjoint bit-reproducible across machines).
"""

from __future__ import annotations

import os

import numpy as np

from . import _siddon_py
from .core import (ConeBeamGeometry, ConfigurationError, LinearMap,
                   ProjectionSet, Volume)

try:
    if os.environ.get("IRNCT_BACKEND", "").lower() == "python":
        raise ImportError("python backend forced")
    from . import _siddon as _kernel
    BACKEND = "compiled"
except ImportError:
    _kernel = _siddon_py
    BACKEND = "python"

KERNELS = {"python": _siddon_py}
if BACKEND == "compiled":
    KERNELS["compiled"] = _kernel


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("IRNCT_NUM_THREADS", "1")))
    except ValueError:
        return 1


def box_min(dims, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    dims = np.asarray(dims, dtype=float)
    return np.asarray(origin, dtype=float) - dims * np.asarray(spacing, dtype=float) / 2.0


def check_geometry(geom: ConeBeamGeometry, dims, spacing, origin=(0.0, 0.0, 0.0)):
    """Reject trajectories whose source enters the volume's bounding box."""
    lo = box_min(dims, spacing, origin)
    hi = lo + np.asarray(dims, dtype=float) * np.asarray(spacing, dtype=float)
    src, _, _ = geom.frames()
    inside = np.all((src >= lo) & (src <= hi), axis=1)
    if np.any(inside):
        raise ConfigurationError(
            f"source lies inside the volume for {int(inside.sum())} angle(s); "
            "increase dso or shrink the volume")


def _kernel_args(geom, dims, spacing, origin):
    src, det, eu = geom.frames()
    u, v = geom.detector_coords()
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    bmin = tuple(float(b) for b in box_min(dims, spacing, origin))
    return dims, spacing, bmin, np.ascontiguousarray(src), \
        np.ascontiguousarray(det), np.ascontiguousarray(eu), u, v


def forward_raw(x, geom, dims, spacing, origin=(0.0, 0.0, 0.0), backend=None) -> np.ndarray:
    kern = KERNELS[backend] if backend else _kernel
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    return kern.forward(x, *_kernel_args(geom, dims, spacing, origin), num_threads=num_threads())


def adjoint_raw(y, geom, dims, spacing, origin=(0.0, 0.0, 0.0), backend=None) -> np.ndarray:
    kern = KERNELS[backend] if backend else _kernel
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    return kern.adjoint(y, *_kernel_args(geom, dims, spacing, origin), num_threads=num_threads())


def project_forward(vol: Volume, geom: ConeBeamGeometry) -> ProjectionSet:
    """Line integrals of ``vol`` along every source-to-pixel ray.

    Values are in attenuation x mm; rays that miss the volume read 0.
    """
    check_geometry(geom, vol.dims, vol.spacing, vol.origin)
    return ProjectionSet(geom, forward_raw(vol.data, geom, vol.dims, vol.spacing, vol.origin))


def project_adjoint(proj: ProjectionSet, geom: ConeBeamGeometry, dims, spacing,
                    origin=(0.0, 0.0, 0.0)) -> Volume:
    """Matched backprojection: transpose of :func:`project_forward`."""
    if proj.size != geom.n_rays:
        raise ConfigurationError(
            f"projection length {proj.size} does not match geometry ({geom.n_rays} rays)")
    check_geometry(geom, dims, spacing, origin)
    return Volume(tuple(dims), tuple(spacing), tuple(origin),
                  adjoint_raw(proj.data, geom, dims, spacing, origin))


def as_linear_map(geom: ConeBeamGeometry, dims, spacing, origin=(0.0, 0.0, 0.0),
                  backend=None) -> LinearMap:
    check_geometry(geom, dims, spacing, origin)
    m = int(np.prod(dims))
    return LinearMap(
        m, geom.n_rays,
        lambda x: forward_raw(x, geom, dims, spacing, origin, backend),
        lambda y: adjoint_raw(y, geom, dims, spacing, origin, backend),
        name="Projector")


def ray_profile(geom: ConeBeamGeometry, angle_index: int, iu: int, iv: int,
                dims, spacing, origin=(0.0, 0.0, 0.0)):
    """Voxel indices and intersection lengths of one detector ray."""
    src, det, eu = geom.frames()
    u, v = geom.detector_coords()
    end = det[angle_index] + u[iu] * eu[angle_index] + np.array([0.0, 0.0, v[iv]])
    return _siddon_py.ray_segments(src[angle_index], end, tuple(dims), tuple(spacing),
                                   box_min(dims, spacing, origin))
