"""Compressed-video restoration and x2 super-resolution with a u-shaped residual CNN.

numpy-only forward/backward passes, RAdam training, YUV420 IO, a synthetic
and an external-codec degradation harness, and PSNR/SSIM/BD-rate metrics.
"""
from .network import (NetworkConfig, NetworkParams, build_network, count_macs, count_params,
                      forward, load_checkpoint, save_checkpoint)
from .optim import OptimHyper
from .train import LossWeights, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig", "NetworkParams", "build_network", "count_macs", "count_params", "forward",
    "load_checkpoint", "save_checkpoint", "OptimHyper", "LossWeights", "TrainConfig",
]
