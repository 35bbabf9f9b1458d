"""Reconstruction drivers: CGLS/SIRT pipelines, IRN-TV/PIPLE/PICCS, ASD-POCS-TV.

The IRN drivers majorise the smoothed objective at the current iterate,
replacing each TV term by a weighted quadratic, and hand the resulting
stacked least-squares problem to warm-started CGLS. Blocks whose scale is
zero are left out of the stack, so e.g. ``irn_piccs`` with ``lam=0`` runs
exactly the same floating-point operations as ``irn_tv``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffreg
from .core import (ConeBeamGeometry, ConfigurationError, LinearMap, ProjectionSet,
                   Volume, identity_map, norm2, stack_maps)
from .diffreg import TVWeights, gradient, gradient_adjoint
from .fdk import fdk as _fdk
from .krylov import KrylovConfig, cgls, sirt, sirt_scalings
from .metrics import ErrorHistory
from .projector import as_linear_map

log = logging.getLogger(__name__)

OBJECTIVES = ("tv", "piple", "piccs")


@dataclass(frozen=True)
class RegularizationParams:
    """Weights and budgets for the IRN drivers.

    ``tau=None`` resolves to ``tau_rel`` times the dynamic range of the first
    iterate that carries structure, and then stays fixed for the whole run.
    """

    alpha: float = 0.0
    lam: float = 0.0
    tau: Optional[float] = None
    outer_iters: int = 4
    inner_iters: int = 25
    tau_rel: float = 1e-4
    warm_start: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ConfigurationError("alpha and lambda must be non-negative")
        if self.tau is not None and not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ConfigurationError("iteration budgets must be >= 1")

    @property
    def total_iters(self) -> int:
        return self.outer_iters * self.inner_iters


@dataclass
class ReconReport:
    volume: Volume
    objective: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    cycle_starts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    iterations: int = 0
    tau: Optional[float] = None
    traces: list = field(default_factory=list)
    stopped_early: bool = False


# ---------------------------------------------------------------------------
# problem plumbing

@dataclass
class _Problem:
    op: LinearMap
    b: np.ndarray
    dims: tuple
    spacing: tuple
    origin: tuple

    def volume(self, x) -> Volume:
        return Volume(self.dims, self.spacing, self.origin, x)


def _problem(proj: ProjectionSet, geom: Optional[ConeBeamGeometry], x0, dims, spacing,
             origin=(0.0, 0.0, 0.0)) -> _Problem:
    geom = geom or proj.geometry
    if proj.size != geom.n_rays:
        raise ConfigurationError("projection data does not match geometry")
    if x0 is not None:
        dims, spacing, origin = x0.dims, x0.spacing, x0.origin
    if dims is None or spacing is None:
        raise ConfigurationError("volume dims/spacing required when x0 is not given")
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    op = as_linear_map(geom, dims, spacing, origin)
    return _Problem(op, np.asarray(proj.data, dtype=np.float64), dims, spacing, tuple(origin))


def _start(prob: _Problem, x0: Optional[Volume]) -> np.ndarray:
    return np.zeros(prob.op.domain_size) if x0 is None else np.array(x0.data, dtype=np.float64)


def _check_prior(prob: _Problem, prior: Optional[Volume]) -> np.ndarray:
    if prior is None:
        raise ConfigurationError("this method needs a prior image")
    if tuple(prior.dims) != prob.dims:
        raise ConfigurationError(f"prior dims {prior.dims} differ from volume dims {prob.dims}")
    return np.asarray(prior.data, dtype=np.float64)


# ---------------------------------------------------------------------------
# objectives

def evaluate_objective(kind: str, x, b, prior, params: RegularizationParams,
                       op: LinearMap, dims, tau: Optional[float] = None) -> float:
    """Smoothed functional that the IRN recursion decreases.

    ``||Ax - b||^2 + 2 alpha^2 TV_tau(x)`` plus ``lam^2 ||x - x_p||^2`` (piple)
    or ``2 lam^2 TV_tau(x - x_p)`` (piccs), where
    ``TV_tau(z) = sum_i sqrt(|(D z)_i|^2 + tau^2)``.

    The factor 2 on the TV terms matches the IRN subproblem: ``||W(z*) z||^2``
    is twice the tangent quadratic of ``TV_tau`` up to a constant, so this is
    the functional with the majorisation-minimisation descent guarantee.
    """
    if kind not in OBJECTIVES:
        raise ConfigurationError(f"unknown objective {kind!r}; choose from {OBJECTIVES}")
    tau = params.tau if tau is None else tau
    if tau is None or not tau > 0:
        raise ConfigurationError("objective needs a positive tau")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    r = op.apply(x) - b
    val = float(np.sum(r * r))
    val += 2.0 * params.alpha ** 2 * diffreg.smoothed_tv(x, dims, tau)
    if kind == "tv":
        return val
    xp = np.asarray(getattr(prior, "data", prior), dtype=np.float64)
    if kind == "piple":
        d = x - xp
        return val + params.lam ** 2 * float(np.sum(d * d))
    return val + 2.0 * params.lam ** 2 * diffreg.smoothed_tv(x - xp, dims, tau)


def default_alpha(proj: ProjectionSet, geom: ConeBeamGeometry, dims, spacing,
                  ratio: float = 0.1, x_ref: Optional[Volume] = None) -> float:
    """``alpha`` with ``alpha^2 TV(x_ref) = ratio * ||A x_ref - b||^2``.

    ``x_ref`` defaults to the FDK reconstruction of ``proj``.
    """
    if x_ref is None:
        x_ref = _fdk(proj, geom, dims, spacing)
    op = as_linear_map(geom, x_ref.dims, x_ref.spacing, x_ref.origin)
    res = op.apply(x_ref.data) - proj.data
    tv = diffreg.tv(x_ref)
    if tv == 0:
        return 0.0
    return float(np.sqrt(ratio * float(np.sum(res * res)) / tv))


# ---------------------------------------------------------------------------
# unregularised pipelines

def fdk(proj: ProjectionSet, geom: ConeBeamGeometry, dims, spacing,
        filter_kind: str = "ram-lak") -> Volume:
    return _fdk(proj, geom, dims, spacing, filter_kind)


def _history(truth):
    return None if truth is None else ErrorHistory(np.asarray(truth.data))


def run_cgls(proj, geom, iters: int, x0: Optional[Volume] = None, *, dims=None,
             spacing=None, truth: Optional[Volume] = None) -> ReconReport:
    """Plain CGLS on ``min ||Ax - b||`` with a fixed iteration count."""
    t0 = time.perf_counter()
    prob = _problem(proj, geom, x0, dims, spacing)
    hist = _history(truth)
    if hist:
        hist.start_cycle()
    x, trace = cgls(prob.op, prob.b, _start(prob, x0) if x0 is not None else None,
                    KrylovConfig(iters, 0.0), callback=hist)
    rep = ReconReport(prob.volume(x), [trace.objective[-1] if trace.objective else
                                       trace.initial_residual ** 2],
                      hist.values if hist else [], hist.boundaries if hist else [],
                      iterations=trace.iterations, traces=[trace])
    rep.timings["solve"] = time.perf_counter() - t0
    return rep


def run_sirt(proj, geom, iters: int, x0: Optional[Volume] = None, *, dims=None,
             spacing=None, truth: Optional[Volume] = None,
             relaxation: float = 1.0) -> ReconReport:
    t0 = time.perf_counter()
    prob = _problem(proj, geom, x0, dims, spacing)
    hist = _history(truth)
    if hist:
        hist.start_cycle()
    x, trace = sirt(prob.op, prob.b, _start(prob, x0), KrylovConfig(iters, 0.0),
                    relaxation=relaxation, callback=hist)
    rep = ReconReport(prob.volume(x), [trace.objective[-1]],
                      hist.values if hist else [], hist.boundaries if hist else [],
                      iterations=trace.iterations, traces=[trace])
    rep.timings["solve"] = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# IRN drivers

def _irn(kind: str, prob: _Problem, params: RegularizationParams,
         prior: Optional[np.ndarray], x0: Optional[Volume],
         truth: Optional[Volume]) -> ReconReport:
    t_start = time.perf_counter()
    x = _start(prob, x0)
    m = prob.op.domain_size
    hist = _history(truth)
    tau = params.tau
    if tau is None and np.ptp(x) > 0:
        tau = diffreg.default_tau(x, params.tau_rel)
    grad_prior = gradient(prior, prob.dims) if kind == "piccs" else None

    report = ReconReport(prob.volume(x))
    t_weights = t_solve = t_obj = 0.0
    for k in range(params.outer_iters):
        t = time.perf_counter()
        if tau is None:
            # flat start: unit weights for the first cycle, tau fixed after it
            w1 = np.ones(m)
        else:
            w1 = diffreg.weights_from_field(x, prob.dims, tau).w
        blocks = [(1.0, prob.op)]
        rhs = [prob.b]
        if params.alpha > 0:
            blocks.append((params.alpha, TVWeights(tau or 1.0, w1).weighted_D(prob.dims)))
            rhs.append(np.zeros(3 * m))
        if params.lam > 0 and kind == "piple":
            blocks.append((params.lam, identity_map(m)))
            rhs.append(params.lam * prior)
        elif params.lam > 0 and kind == "piccs":
            if tau is None:
                w2 = np.ones(m)
            else:
                g = gradient(x, prob.dims) - grad_prior
                w2 = (np.sum(g * g, axis=0).ravel() + tau * tau) ** -0.25
            wd = TVWeights(tau or 1.0, w2)
            blocks.append((params.lam, wd.weighted_D(prob.dims)))
            rhs.append(params.lam * wd.diagonal * grad_prior.ravel())
        op = stack_maps(blocks) if len(blocks) > 1 else prob.op
        t_weights += time.perf_counter() - t

        t = time.perf_counter()
        if hist:
            hist.start_cycle()
        x, trace = cgls(op, np.concatenate(rhs) if len(rhs) > 1 else rhs[0],
                        x if params.warm_start else None,
                        KrylovConfig(params.inner_iters, 0.0), callback=hist)
        t_solve += time.perf_counter() - t
        report.traces.append(trace)
        report.iterations += trace.iterations

        if tau is None:
            tau = diffreg.default_tau(x, params.tau_rel)
        t = time.perf_counter()
        report.objective.append(
            evaluate_objective(kind, x, prob.b, prior, params, prob.op, prob.dims, tau))
        t_obj += time.perf_counter() - t
        log.debug("%s outer %d: objective %.6e", kind, k + 1, report.objective[-1])

    report.volume = prob.volume(x)
    report.tau = tau
    if hist:
        report.errors = hist.values
        report.cycle_starts = hist.boundaries
    report.timings.update(weights=t_weights, solve=t_solve, objective=t_obj,
                          total=time.perf_counter() - t_start)
    return report


def irn_tv(proj: ProjectionSet, geom: Optional[ConeBeamGeometry],
           params: RegularizationParams, x0: Optional[Volume] = None, *,
           dims=None, spacing=None, truth: Optional[Volume] = None) -> ReconReport:
    """IRN for ``||Ax - b||^2 + alpha^2 TV(x)``.

    Each outer cycle freezes the weights at the previous iterate and runs
    ``inner_iters`` CGLS steps on ``[A; alpha W D] x = [b; 0]``.
    """
    prob = _problem(proj, geom, x0, dims, spacing)
    return _irn("tv", prob, params, None, x0, truth)


def irn_piple(proj: ProjectionSet, geom: Optional[ConeBeamGeometry],
              params: RegularizationParams, prior: Volume, x0: Optional[Volume] = None, *,
              dims=None, spacing=None, truth: Optional[Volume] = None) -> ReconReport:
    """IRN for TV plus the quadratic prior term ``lam^2 ||x - x_p||^2``.

    Stack: ``[A; alpha W D; lam I] x = [b; 0; lam x_p]``.
    """
    prob = _problem(proj, geom, x0, dims or prior.dims, spacing or prior.spacing)
    return _irn("piple", prob, params, _check_prior(prob, prior), x0, truth)


def irn_piccs(proj: ProjectionSet, geom: Optional[ConeBeamGeometry],
              params: RegularizationParams, prior: Volume, x0: Optional[Volume] = None, *,
              dims=None, spacing=None, truth: Optional[Volume] = None) -> ReconReport:
    """IRN for ``TV(x)`` and ``TV(x - x_p)`` penalties.

    Stack: ``[A; alpha W1 D; lam W2 D] x = [b; 0; lam W2 D x_p]`` with ``W2``
    built from the gradient of ``x - x_p``.
    """
    prob = _problem(proj, geom, x0, dims or prior.dims, spacing or prior.spacing)
    return _irn("piccs", prob, params, _check_prior(prob, prior), x0, truth)


# ---------------------------------------------------------------------------
# ASD-POCS

@dataclass(frozen=True)
class AsdPocsConfig:
    """The eight ASD-POCS hyperparameters.

    beta, beta_red: data-step relaxation and its per-iteration decay.
    ng: TV steepest-descent steps per iteration.
    alpha, alpha_red: TV step size relative to the data-step change, and its
    decay when the TV step dominates.
    r_max: maximum allowed ratio of TV change to data change.
    epsilon: data-residual tolerance for the stopping test.
    max_iters: iteration cap.
    """

    beta: float = 1.0
    beta_red: float = 0.995
    ng: int = 20
    alpha: float = 0.002
    alpha_red: float = 0.95
    r_max: float = 0.95
    epsilon: float = 0.0
    max_iters: int = 100
    nonneg: bool = True
    tv_eps: float = 1e-8


def _tv_gradient(x, dims, eps):
    g = gradient(x, dims)
    mag = np.sqrt(np.sum(g * g, axis=0) + eps * eps)
    return gradient_adjoint(g / mag[None], dims)


def view_maps(geom: ConeBeamGeometry, dims, spacing, origin=(0.0, 0.0, 0.0)):
    return [as_linear_map(geom.with_angles(geom.angles[a:a + 1]), dims, spacing, origin)
            for a in range(geom.n_angles)]


def sart_sweep(views, b_views, x, scalings, beta: float, nonneg: bool) -> np.ndarray:
    """One pass of view-ordered SART: ``x += beta C_a A_a^T R_a (b_a - A_a x)``."""
    for op, b, (R, C) in zip(views, b_views, scalings):
        x = x + beta * C * op.apply_adjoint(R * (b - op.apply(x)))
        if nonneg:
            np.maximum(x, 0.0, out=x)
    return x


def asd_pocs_tv(proj: ProjectionSet, geom: Optional[ConeBeamGeometry], config: AsdPocsConfig,
                x0: Optional[Volume] = None, *, dims=None, spacing=None,
                truth: Optional[Volume] = None) -> ReconReport:
    """Adaptive steepest descent + POCS for TV-constrained reconstruction.

    Alternates a view-ordered SART sweep (with optional positivity) with
    ``ng`` normalised TV-gradient steps, adapting the TV step so it never
    outweighs the data step. Stops at ``max_iters`` or once the data residual
    is within ``epsilon`` and the data and TV directions oppose each other.
    """
    t_start = time.perf_counter()
    geom = geom or proj.geometry
    prob = _problem(proj, geom, x0, dims, spacing)
    views = view_maps(geom, prob.dims, prob.spacing, prob.origin)
    nray = geom.detector_shape[0] * geom.detector_shape[1]
    b_views = [prob.b[a * nray:(a + 1) * nray] for a in range(geom.n_angles)]
    scalings = [sirt_scalings(v) for v in views]
    hist = _history(truth)
    if hist:
        hist.start_cycle()

    x = _start(prob, x0)
    beta = config.beta
    dtvg = None
    report = ReconReport(prob.volume(x))
    for it in range(1, config.max_iters + 1):
        x_prev = x
        x = sart_sweep(views, b_views, x.copy(), scalings, beta, config.nonneg)
        data_step = x - x_prev
        dp = norm2(data_step)
        dd = norm2(prob.op.apply(x) - prob.b)
        if dtvg is None:
            dtvg = config.alpha * dp
        x_res = x
        for _ in range(config.ng):
            g = _tv_gradient(x, prob.dims, config.tv_eps)
            gn = norm2(g)
            if gn == 0:
                break
            x = x - dtvg * g / gn
        tv_step = x - x_res
        dg = norm2(tv_step)
        if dg > config.r_max * dp and dd > config.epsilon:
            dtvg *= config.alpha_red
        beta *= config.beta_red
        report.iterations = it
        report.objective.append(dd * dd)
        if hist:
            hist(x, it)
        if dp > 0 and dg > 0 and dd <= config.epsilon:
            cos = float(np.dot(data_step, tv_step)) / (dp * dg)
            if cos < -0.99:
                report.stopped_early = True
                break

    report.volume = prob.volume(x)
    if hist:
        report.errors = hist.values
        report.cycle_starts = hist.boundaries
    report.timings["total"] = report.timings["solve"] = time.perf_counter() - t_start
    return report
