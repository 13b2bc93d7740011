"""Learned half-quadratic splitting for compressed-sensing MR reconstruction."""
from .hqs_core import HqsParams, dc_update, hqs_reconstruct, soft_threshold_denoiser
from .models import ModelConfig, build_model, count_parameters, estimate_flops, load_checkpoint, save_checkpoint
from .mri_ops import SamplingMask, fft2c, forward_model, ifft2c, make_cartesian_mask, normalize_p99, zero_filled
from .objectives import compound_loss, ms_ssim, nrmse, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "HqsParams",
    "ModelConfig",
    "SamplingMask",
    "build_model",
    "compound_loss",
    "count_parameters",
    "dc_update",
    "estimate_flops",
    "fft2c",
    "forward_model",
    "hqs_reconstruct",
    "ifft2c",
    "load_checkpoint",
    "make_cartesian_mask",
    "ms_ssim",
    "normalize_p99",
    "nrmse",
    "psnr",
    "save_checkpoint",
    "soft_threshold_denoiser",
    "ssim",
    "zero_filled",
]
