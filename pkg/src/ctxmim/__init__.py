"""Context-enhanced masked image modeling at desk scale."""

from .backbone import Backbone, BranchOutput, init_params
from .config import (
    BackboneConfig,
    DatasetConfig,
    LossWeights,
    OptimizerConfig,
    ProbeConfig,
    RunConfig,
    SynthConfig,
    TrainConfig,
)
from .objective import LossBreakdown, grad_total, total_loss
from .patchgrid import MaskSpec, PatchGrid, PatchSequence, generate_mask, patchify, unpatchify
from .trainer import pretrain

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "BranchOutput",
    "DatasetConfig",
    "LossBreakdown",
    "LossWeights",
    "MaskSpec",
    "OptimizerConfig",
    "PatchGrid",
    "PatchSequence",
    "ProbeConfig",
    "RunConfig",
    "SynthConfig",
    "TrainConfig",
    "generate_mask",
    "grad_total",
    "init_params",
    "patchify",
    "pretrain",
    "total_loss",
    "unpatchify",
]
