"""Channel-attention residual U-Net for retinal vessel segmentation.

A from-scratch reverse-mode tensor engine, the attention and residual
blocks built on it, the full U-shaped network, data pipeline, metrics, and
training harness, plus a batch CLI (`carunet`).
"""

from .attention import ChannelDescriptors, MecaModule, meca_apply, meca_map, spatial_avg_pool, spatial_max_pool
from .blocks import Cadrb, ResidualUnit, parameter_count
from .data import FundusSample, SplitPlan, augment, crop_to_original, load_dataset, make_synthetic, pad_to_target
from .errors import CarUnetError, CheckpointError, ConfigError, DataError, NumericError, ShapeError, TapeError
from .layers import (
    BatchNormState,
    Conv2dParams,
    DropBlockConfig,
    batchnorm2d,
    concat_channels,
    conv1d_shared,
    conv2d,
    conv_transpose2d,
    dropblock,
    maxpool2d_2x2,
    pointwise_activation,
    relu,
    sigmoid,
)
from .metrics import ConfusionCounts, MetricsReport, auc, confusion, dice, evaluate_model
from .network import CarUnet, CarUnetConfig, build_network, load_weights, save_weights
from .tensor import Tape, Tensor, backward, enable_nan_checks, grad_check, record
from .training import Adam, AdamState, TrainConfig, TRAIN_PRESETS, adam_step, bce_loss, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "Cadrb",
    "CarUnet",
    "CarUnetConfig",
    "CarUnetError",
    "ChannelDescriptors",
    "CheckpointError",
    "ConfigError",
    "ConfusionCounts",
    "Conv2dParams",
    "DataError",
    "DropBlockConfig",
    "FundusSample",
    "MecaModule",
    "MetricsReport",
    "NumericError",
    "ResidualUnit",
    "ShapeError",
    "SplitPlan",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "TRAIN_PRESETS",
    "adam_step",
    "auc",
    "augment",
    "backward",
    "batchnorm2d",
    "bce_loss",
    "build_network",
    "concat_channels",
    "confusion",
    "conv1d_shared",
    "conv2d",
    "conv_transpose2d",
    "crop_to_original",
    "dice",
    "dropblock",
    "enable_nan_checks",
    "evaluate_model",
    "grad_check",
    "load_dataset",
    "load_weights",
    "make_synthetic",
    "maxpool2d_2x2",
    "meca_apply",
    "meca_map",
    "pad_to_target",
    "parameter_count",
    "pointwise_activation",
    "record",
    "relu",
    "save_weights",
    "sigmoid",
    "spatial_avg_pool",
    "spatial_max_pool",
    "train",
]
