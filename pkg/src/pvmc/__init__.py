"""Poisson variance-mean consistency (PVMC) denoising toolkit.

Synthetic PET count simulation with a known Poisson slope, a small numpy
reverse-mode autodiff engine, a U-Net denoiser trained with an L1 plus
patch-wise variance-mean penalty, and diagnostics for the resulting models.
"""

__version__ = "0.1.0"

from .denoiser import NetConfig, UNet
from .estimator import PVMCDenoiser
from .patchstats import PatchSpec, PvmcState, pvmc_loss
from .simulator import analytic_k, make_dataset, make_phantom, make_system
from .trainer import TrainConfig, train, train_l1

__all__ = [
    "NetConfig",
    "PVMCDenoiser",
    "PatchSpec",
    "PvmcState",
    "TrainConfig",
    "UNet",
    "analytic_k",
    "make_dataset",
    "make_phantom",
    "make_system",
    "pvmc_loss",
    "train",
    "train_l1",
]
