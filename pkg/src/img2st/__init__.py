"""Image-to-image prediction of high-definition spatial transcriptomics.

A region image is mapped in one forward pass to a C x H' x W' grid of
log-normalised gene expression, one cell per HD bin.
"""
from .estimator import Img2STRegressor, SpotRegressor
from .losses import LossConfig
from .metrics import SsimConfig, evaluate, pcc, ssim_st
from .model import ModelConfig, ModelParams
from .training import TrainConfig

__all__ = [
    "Img2STRegressor",
    "SpotRegressor",
    "LossConfig",
    "ModelConfig",
    "ModelParams",
    "SsimConfig",
    "TrainConfig",
    "evaluate",
    "pcc",
    "ssim_st",
]

__version__ = "0.1.0"
