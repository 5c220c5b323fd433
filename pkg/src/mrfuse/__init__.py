"""MRF-UNet: a 3D segmentation CNN fused with a stationary MRF label prior."""

from .meanfield import FusionConfig, free_energy, fuse_forward, mean_field_sweep, normalize_logits
from .model import MRFUNet, build_model
from .mrf import MRFKernel, MRFNetParams, build_mrf_net, mrf_message_linear, mrf_message_net
from .tensor import GradTape, Tensor, precision, set_precision
from .unet import UNetConfig, build_unet, param_count, unet_forward

__all__ = [
    "FusionConfig", "GradTape", "MRFKernel", "MRFNetParams", "MRFUNet", "Tensor", "UNetConfig",
    "build_model", "build_mrf_net", "build_unet", "free_energy", "fuse_forward", "mean_field_sweep",
    "mrf_message_linear", "mrf_message_net", "normalize_logits", "param_count", "precision",
    "set_precision", "unet_forward",
]
