"""Desk-scale stand-ins for data, denoisers and training."""

from .denoisers import ConditioningPassthrough, GaussianDenoiser, PointMassDenoiser, PointwiseDenoiser
from .network import ToyArchitecture, ToyDenoiser, widen_input
from .scenes import ToyScene, gen_scene, normals_from_depth
from .training import (
    DistillConfig,
    TrainingDiverged,
    distill_lcm,
    lcm_sample,
    patch_loss_mask,
    train_denoiser,
)

__all__ = [
    "ConditioningPassthrough",
    "DistillConfig",
    "GaussianDenoiser",
    "PointMassDenoiser",
    "PointwiseDenoiser",
    "ToyArchitecture",
    "ToyDenoiser",
    "ToyScene",
    "TrainingDiverged",
    "distill_lcm",
    "gen_scene",
    "lcm_sample",
    "normals_from_depth",
    "patch_loss_mask",
    "train_denoiser",
    "widen_input",
]
