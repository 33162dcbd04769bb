"""Network definitions for the joint denoising and segmentation model."""

from .denoiser import Denoiser
from .params import JointModel, ModelParams, init_params, load_checkpoint, save_checkpoint
from .revision import Revision
from .segmenter import Segmenter
from .ssm import ResMambaBlock, SsmParams, ssm_scan

__all__ = [
    "Denoiser",
    "Revision",
    "Segmenter",
    "JointModel",
    "ModelParams",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "ResMambaBlock",
    "SsmParams",
    "ssm_scan",
]
