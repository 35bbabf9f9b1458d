"""Finite differences, isotropic TV and the reweighting machinery of IRN.

Each directional difference is ``(D1 z)_i = z_i - z_{i+1}`` along its axis,
with the last row of every 1D block zeroed so that all three blocks are square
``M x M`` and the stacked operator maps ``M -> 3M``. Constant volumes remain
the only null vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, LinearMap, Volume, diagonal_map, compose

TAU_FLOOR = 1e-8


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(a)
    n = a.shape[axis]
    if n > 1:
        lead = [slice(None)] * 3
        nxt = [slice(None)] * 3
        lead[axis] = slice(0, n - 1)
        nxt[axis] = slice(1, n)
        out[tuple(lead)] = a[tuple(lead)] - a[tuple(nxt)]
    return out


def _diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(g)
    n = g.shape[axis]
    if n > 1:
        s = [slice(None)] * 3

        def sl(a, b):
            s2 = list(s)
            s2[axis] = slice(a, b)
            return tuple(s2)

        out[sl(0, n - 1)] += g[sl(0, n - 1)]
        out[sl(1, n)] -= g[sl(0, n - 1)]
    return out


# axis of the (nz, ny, nx) array differentiated by the x, y and z blocks
_AXES = (2, 1, 0)


def gradient(x, dims) -> np.ndarray:
    """``D x`` as a ``(3, nz, ny, nx)`` array (x, y, z blocks)."""
    nx, ny, nz = dims
    a = np.asarray(x, dtype=np.float64).reshape(nz, ny, nx)
    return np.stack([_diff(a, ax) for ax in _AXES])


def gradient_adjoint(g, dims) -> np.ndarray:
    """``D^T g`` for a stacked gradient field; returns a flat vector."""
    nx, ny, nz = dims
    g = np.asarray(g, dtype=np.float64).reshape(3, nz, ny, nx)
    out = _diff_adjoint(g[0], _AXES[0])
    out += _diff_adjoint(g[1], _AXES[1])
    out += _diff_adjoint(g[2], _AXES[2])
    return out.ravel()


class DiffOperator(LinearMap):
    """Stacked forward-difference operator ``[D_x; D_y; D_z]``."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        m = int(np.prod(self.dims))
        super().__init__(m, 3 * m, lambda x: gradient(x, self.dims).ravel(),
                         lambda g: gradient_adjoint(g, self.dims), name="D")


def apply_D(vol: Volume) -> np.ndarray:
    """Flat ``3M`` gradient field of ``vol``."""
    return gradient(vol.data, vol.dims).ravel()


def apply_D_adjoint(field, dims) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64).ravel()
    if field.size != 3 * int(np.prod(dims)):
        raise ConfigurationError(f"gradient field of length {field.size} does not match {dims}")
    return gradient_adjoint(field, dims)


def grad_magnitude_sq(x, dims) -> np.ndarray:
    g = gradient(x, dims)
    return np.sum(g * g, axis=0).ravel()


def tv(vol: Volume) -> float:
    """Isotropic total variation ``sum_i |(D x)_i|``."""
    return float(np.sum(np.sqrt(grad_magnitude_sq(vol.data, vol.dims))))


def smoothed_tv(x, dims, tau: float) -> float:
    """``sum_i sqrt(|(D x)_i|^2 + tau^2)``."""
    return float(np.sum(np.sqrt(grad_magnitude_sq(x, dims) + tau * tau)))


def _check_tau(tau):
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")


def smoothed_l1_weights(z, tau: float) -> np.ndarray:
    """Diagonal of the smoothed reweighting ``(z^2 + tau^2)^(-1/4)``."""
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    return (z * z + tau * tau) ** -0.25


@dataclass(frozen=True)
class TVWeights:
    """Per-voxel weight field shared by the three directional blocks."""

    tau: float
    w: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        """Full ``3M`` diagonal: the voxel field repeated once per block."""
        return np.tile(self.w, 3)

    def as_map(self) -> LinearMap:
        return diagonal_map(self.diagonal)

    def weighted_D(self, dims) -> LinearMap:
        """``W D`` as a single map."""
        return compose(self.as_map(), DiffOperator(dims))


def weights_from_field(x, dims, tau: float) -> TVWeights:
    _check_tau(tau)
    w = (grad_magnitude_sq(x, dims) + tau * tau) ** -0.25
    return TVWeights(float(tau), w)


def tv_weights(vol: Volume, tau: float) -> TVWeights:
    """IRN weights ``(|grad x|^2 + tau^2)^(-1/4)`` for isotropic TV."""
    return weights_from_field(vol.data, vol.dims, tau)


def piccs_weights(vol: Volume, prior: Volume, tau: float) -> tuple[TVWeights, TVWeights]:
    """Weights for ``TV(x)`` and ``TV(x - x_prior)``."""
    if vol.dims != prior.dims:
        raise ConfigurationError(f"prior dims {prior.dims} differ from volume dims {vol.dims}")
    w1 = tv_weights(vol, tau)
    # D is linear, so grad(x) - grad(x_p) is formed directly
    g = gradient(vol.data, vol.dims) - gradient(prior.data, prior.dims)
    w2 = (np.sum(g * g, axis=0).ravel() + tau * tau) ** -0.25
    return w1, TVWeights(float(tau), w2)


def default_tau(x, rel: float = 1e-4) -> float:
    """``rel`` times the dynamic range of ``x``, floored at ``TAU_FLOOR``."""
    x = np.asarray(x)
    span = float(x.max() - x.min()) if x.size else 0.0
    return max(rel * span, TAU_FLOOR)
