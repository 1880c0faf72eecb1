"""Multi-resolution diffusion engine for mobile-traffic fields.

Core pieces: resolution-aware grids and metrics (``grids``), a synthetic-city
generator with bit-exact bundles (``synth``, ``bundle``), stage plans and
noise schedules (``schedule``), prior-noise guidance (``guidance``), a
gradient-checked conditional denoiser (``denoiser``), the multi-stage
training/sampling engine (``engine``), a scikit-learn style estimator
(``estimator``) and the ``drdm`` command line harness (``cli``).
"""

from .grids import (
    MultiScaleTraffic,
    ResolutionLevel,
    SpatioTemporalGrid,
    coarsen,
    mae,
    psnr,
    rmse,
    rv_coefficient,
    sp_rmse,
    upsample,
)
from .schedule import RGPPlan, ScheduleSpec, plan_rgp
from .guidance import GuidanceConfig
from .denoiser import DenoiserConfig
from .synth import CityConfig, SyntheticCity, UrbanContext, build_ladder, generate_city
from .estimator import MultiScaleDiffusion

__version__ = "0.1.0"

__all__ = [
    "CityConfig",
    "DenoiserConfig",
    "GuidanceConfig",
    "MultiScaleDiffusion",
    "MultiScaleTraffic",
    "RGPPlan",
    "ResolutionLevel",
    "ScheduleSpec",
    "SpatioTemporalGrid",
    "SyntheticCity",
    "UrbanContext",
    "build_ladder",
    "coarsen",
    "generate_city",
    "mae",
    "plan_rgp",
    "psnr",
    "rmse",
    "rv_coefficient",
    "sp_rmse",
    "upsample",
    "__version__",
]
