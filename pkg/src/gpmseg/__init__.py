"""Depth-prior-guided skip refinement for polyp segmentation.

The core block fuses an externally estimated depth map into U-Net skip
features through paired self/cross updates built from spatial+channel
attention and a row-stochastic token-similarity map. The package also
carries the reference U-Net host, training/evaluation harness, depth and
segmentation metrics, complexity accounting, and a CLI.
"""

__version__ = "0.1.0"

from .attention import ChannelAttention, SCAUnit, SpatialAttention
from .backbone import UNet, build_model, model_config, model_from_config
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .complexity import ComplexityReport, count_flops, count_params
from .data import ManifestDataset, SyntheticPolypDataset, generate_synthetic_dataset
from .depth_io import (
    DepthMetrics,
    DepthRecord,
    depth_metrics,
    load_depth,
    read_pairing_manifest,
    save_depth_png,
    save_depth_raw,
    synth_depth,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    TrainingDiverged,
    UnsupportedLayerError,
)
from .gpm import ChainOrder, GeometricPriorChain, GeometricPriorModule, StagePlan
from .metrics import SegScores, SeedAggregate, aggregate, binarize, dice_iou, score_images
from .train import (
    TrainConfig,
    TrainState,
    augment,
    build_seeded_model,
    evaluate_model,
    load_config,
    lr_at_epoch,
    seg_loss,
    train_run,
)

__all__ = [
    "ChannelAttention",
    "SCAUnit",
    "SpatialAttention",
    "UNet",
    "build_model",
    "model_config",
    "model_from_config",
    "load_checkpoint",
    "model_from_checkpoint",
    "save_checkpoint",
    "ComplexityReport",
    "count_flops",
    "count_params",
    "ManifestDataset",
    "SyntheticPolypDataset",
    "generate_synthetic_dataset",
    "DepthMetrics",
    "DepthRecord",
    "depth_metrics",
    "load_depth",
    "read_pairing_manifest",
    "save_depth_png",
    "save_depth_raw",
    "synth_depth",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "TrainingDiverged",
    "UnsupportedLayerError",
    "ChainOrder",
    "GeometricPriorChain",
    "GeometricPriorModule",
    "StagePlan",
    "SegScores",
    "SeedAggregate",
    "aggregate",
    "binarize",
    "dice_iou",
    "score_images",
    "TrainConfig",
    "TrainState",
    "augment",
    "build_seeded_model",
    "evaluate_model",
    "load_config",
    "lr_at_epoch",
    "seg_loss",
    "train_run",
]
