"""Matrix-free cone-beam CT reconstruction with IRN-accelerated TV, PIPLE and PICCS."""

from .core import (ConeBeamGeometry, ConfigurationError, LinearMap, ProjectionSet, Volume,
                   circular_geometry, load_projections, load_volume, save_projections,
                   save_volume, stack_maps)
from .fdk import fdk
from .krylov import KrylovConfig, cgls, sirt
from .metrics import psnr, rel_error, ssim3d
from .phantoms import Insert, NoiseModel, PhantomSpec, make_phantom, simulate_scan, subsample_angles
from .projector import BACKEND, as_linear_map, project_adjoint, project_forward
from .recon import (AsdPocsConfig, RegularizationParams, asd_pocs_tv, evaluate_objective,
                    irn_piccs, irn_piple, irn_tv, run_cgls, run_sirt)

__version__ = "0.1.0"

__all__ = [
    "AsdPocsConfig", "BACKEND", "ConeBeamGeometry", "ConfigurationError", "Insert",
    "KrylovConfig", "LinearMap", "NoiseModel", "PhantomSpec", "ProjectionSet",
    "RegularizationParams", "Volume", "as_linear_map", "asd_pocs_tv", "cgls",
    "circular_geometry", "evaluate_objective", "fdk", "irn_piccs", "irn_piple", "irn_tv",
    "load_projections", "load_volume", "make_phantom", "project_adjoint", "project_forward",
    "psnr", "rel_error", "run_cgls", "run_sirt", "save_projections", "save_volume",
    "simulate_scan", "sirt", "ssim3d", "stack_maps", "subsample_angles",
]
