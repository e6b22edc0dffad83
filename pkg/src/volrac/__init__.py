"""Volumetric windowed-transformer engine for retrospective artifact correction."""

from .artifacts import ArtifactConfig, ArtifactRecipe, bernoulli_process, replay
from .metrics import BinaryMask, MetricReport, dice, dice_delta, psnr, ssim3
from .model import FeatureGrid, ModelConfig, ModelParams, forward, init_params
from .train import OptimizerConfig, TrainConfig, accumulate_and_step, adam_step, train
from .volume import PatchGrid, PhantomSpec, Volume, generate_phantom, patchify, read_volume, unpatchify, write_volume
from .windows import (
    PermutationTable,
    WindowIdMap,
    compactify,
    context_reachability,
    decompactify,
    g2l_ids,
    g2l_permutation,
    invert_g2l,
    sw_msa_ids,
    w_msa_ids,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactConfig",
    "ArtifactRecipe",
    "BinaryMask",
    "FeatureGrid",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "OptimizerConfig",
    "PatchGrid",
    "PermutationTable",
    "PhantomSpec",
    "TrainConfig",
    "Volume",
    "WindowIdMap",
    "accumulate_and_step",
    "adam_step",
    "bernoulli_process",
    "compactify",
    "context_reachability",
    "decompactify",
    "dice",
    "dice_delta",
    "forward",
    "g2l_ids",
    "g2l_permutation",
    "generate_phantom",
    "init_params",
    "invert_g2l",
    "patchify",
    "psnr",
    "read_volume",
    "replay",
    "ssim3",
    "sw_msa_ids",
    "train",
    "unpatchify",
    "w_msa_ids",
    "write_volume",
]
