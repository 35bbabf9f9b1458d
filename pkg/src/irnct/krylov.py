"""Inner least-squares solvers on arbitrary linear maps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ConfigurationError, LinearMap, dot, norm2

IterCallback = Callable[[np.ndarray, int], None]


@dataclass(frozen=True)
class KrylovConfig:
    max_iters: int = 25
    residual_tol: float = 1e-6
    record_history: bool = True

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.residual_tol < 0:
            raise ConfigurationError("residual_tol must be >= 0")


@dataclass
class SolveTrace:
    """Per-iteration record of one inner solve.

    ``residual_norms[j]`` is ``||A x_{j+1} - b||`` after iteration ``j + 1``,
    ``objective`` its square, ``times`` seconds since the solve started.
    """

    residual_norms: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    times: list = field(default_factory=list)
    iterations: int = 0
    breakdown: bool = False
    converged: bool = False
    initial_residual: float = float("nan")

    def record(self, rnorm: float, t0: float, keep: bool):
        self.iterations += 1
        if keep:
            self.residual_norms.append(rnorm)
            self.objective.append(rnorm * rnorm)
            self.times.append(time.perf_counter() - t0)


def _check(op: LinearMap, rhs, x0):
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if rhs.size != op.range_size:
        raise ConfigurationError(f"rhs length {rhs.size} != range {op.range_size}")
    if x0 is None:
        x = np.zeros(op.domain_size)
    else:
        x = np.array(x0, dtype=np.float64).ravel()
        if x.size != op.domain_size:
            raise ConfigurationError(f"x0 length {x.size} != domain {op.domain_size}")
    return rhs, x


def cgls(op: LinearMap, rhs, x0=None, cfg: KrylovConfig = KrylovConfig(),
         callback: Optional[IterCallback] = None,
         budget: Optional[int] = None) -> tuple[np.ndarray, SolveTrace]:
    """Conjugate gradients on the normal equations of ``min ||op x - rhs||``.

    Starts from ``x0`` (zero if omitted) and iterates on the correction, so a
    warm start keeps the residual non-increasing from ``op x0 - rhs`` on.
    Stops after ``cfg.max_iters`` iterations (or ``budget`` if given), or once
    ``||op^T r|| <= residual_tol * ||op^T rhs||``. A zero-curvature direction
    ends the solve with ``trace.breakdown`` set.

    ``callback(x, j)`` is called after iteration ``j`` (1-based) with the
    current iterate; it must not modify ``x``.
    """
    rhs, x = _check(op, rhs, x0)
    n_iter = cfg.max_iters if budget is None else int(budget)
    trace = SolveTrace()
    t0 = time.perf_counter()

    r = rhs - op.apply(x) if x0 is not None else rhs.copy()
    s = op.apply_adjoint(r)
    p = s.copy()
    gamma = dot(s, s)
    trace.initial_residual = norm2(r)
    ref = norm2(op.apply_adjoint(rhs)) if x0 is not None else np.sqrt(gamma)
    stop = cfg.residual_tol * (ref if ref > 0 else 1.0)

    if gamma == 0.0 or np.sqrt(gamma) <= stop:
        trace.converged = True
        return x, trace

    for j in range(1, n_iter + 1):
        q = op.apply(p)
        delta = dot(q, q)
        if delta <= 0.0:
            trace.breakdown = True
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = op.apply_adjoint(r)
        gamma_new = dot(s, s)
        trace.record(norm2(r), t0, cfg.record_history)
        if callback is not None:
            callback(x, j)
        if np.sqrt(gamma_new) <= stop:
            trace.converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, trace


def sirt_scalings(op: LinearMap, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Inverse row sums ``R`` and column sums ``C`` from ones-vectors.

    Uses ``op 1`` and ``op^T 1``, which equal the row/column sums of ``|A|`` for
    non-negative system matrices such as the projector. Sums below ``eps`` map
    to 0 instead of blowing up.
    """
    rows = op.apply(np.ones(op.domain_size))
    cols = op.apply_adjoint(np.ones(op.range_size))
    R = np.zeros_like(rows)
    C = np.zeros_like(cols)
    R[np.abs(rows) > eps] = 1.0 / rows[np.abs(rows) > eps]
    C[np.abs(cols) > eps] = 1.0 / cols[np.abs(cols) > eps]
    return R, C


def sirt(op: LinearMap, rhs, x0=None, cfg: KrylovConfig = KrylovConfig(),
         relaxation: float = 1.0, callback: Optional[IterCallback] = None,
         scalings=None) -> tuple[np.ndarray, SolveTrace]:
    """Fixed-count SIRT: ``x <- x + relaxation * C A^T R (b - A x)``."""
    rhs, x = _check(op, rhs, x0)
    R, C = sirt_scalings(op) if scalings is None else scalings
    trace = SolveTrace()
    t0 = time.perf_counter()
    r = rhs - op.apply(x)
    trace.initial_residual = norm2(r)
    for j in range(1, cfg.max_iters + 1):
        x += relaxation * C * op.apply_adjoint(R * r)
        r = rhs - op.apply(x)
        trace.record(norm2(r), t0, cfg.record_history)
        if callback is not None:
            callback(x, j)
    return x, trace
