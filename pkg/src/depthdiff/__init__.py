"""Diffusion-based dense prediction: schedules, ensembling, tiling and evaluation."""

from .ensemble import EnsembleSolution, ensemble_normals, optimize_ensemble
from .grid import DegenerateError, Field2D, FieldStack
from .metrics import MetricsReport, evaluate_depth, evaluate_image, evaluate_normals
from .normalize import DepthNormalization, denormalize_depth, normalize_depth
from .schedule import (
    DiffusionSchedule,
    LcmConfig,
    Parameterization,
    ddim_sample,
    make_schedule,
    make_spacing,
    rescale_zero_snr,
)
from .tiling import TileLayout, fuse_tiles, hires_pipeline, make_tile_layout, multidiffusion_sample

__version__ = "0.1.0"

__all__ = [
    "DegenerateError",
    "DepthNormalization",
    "DiffusionSchedule",
    "EnsembleSolution",
    "Field2D",
    "FieldStack",
    "LcmConfig",
    "MetricsReport",
    "Parameterization",
    "TileLayout",
    "ddim_sample",
    "denormalize_depth",
    "ensemble_normals",
    "evaluate_depth",
    "evaluate_image",
    "evaluate_normals",
    "fuse_tiles",
    "hires_pipeline",
    "make_schedule",
    "make_spacing",
    "make_tile_layout",
    "multidiffusion_sample",
    "normalize_depth",
    "optimize_ensemble",
    "rescale_zero_snr",
]
