"""Inverse design of periodic cellular metamaterials with a video denoising
diffusion model conditioned on target stress-strain responses."""

from .data import STRAIN_LEVELS, FieldSequence, NormalizationStats, curve_from_fields, strain_levels
from .design import GrfSpec, UnitCell, check_connectivity, generate_unit_cell
from .diffusion import DiffusionSchedule, GuidanceConfig, forward_sample, guided_noise, sample, training_loss
from .fe import MaterialParams, run_strain_sweep, solve_compression
from .metrics import nrmse, rel_l2_field
from .postproc import extract_topology, predict_curve, to_eulerian
from .unet import DenoiserConfig, VideoUNet

__version__ = "0.1.0"

__all__ = [
    "STRAIN_LEVELS", "FieldSequence", "NormalizationStats", "curve_from_fields", "strain_levels",
    "GrfSpec", "UnitCell", "check_connectivity", "generate_unit_cell",
    "DiffusionSchedule", "GuidanceConfig", "forward_sample", "guided_noise", "sample", "training_loss",
    "MaterialParams", "run_strain_sweep", "solve_compression",
    "nrmse", "rel_l2_field",
    "extract_topology", "predict_curve", "to_eulerian",
    "DenoiserConfig", "VideoUNet",
]
