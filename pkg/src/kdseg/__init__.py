"""Knowledge distillation from a multi-modal 3D segmentation teacher to a
mono-modal student.

The package trains a multi-modal encoder-decoder teacher on ground truth,
freezes it, and trains a mono-modal student with a combination of
soft-target distillation, bottleneck KL alignment, and ground-truth
supervision. See the README for the CLI walkthrough.
"""

from .config import DataConfig, ResolvedConfig, resolve_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    IngestionError,
    KDSegError,
    TrainingError,
)
from .evaluation import (
    AblationRow,
    AblationSpec,
    RegionScores,
    default_ablation_rows,
    emit_report,
    evaluate,
    hard_dice,
    run_ablation,
)
from .losses import (
    LossReport,
    LossWeights,
    binarize,
    binary_cross_entropy,
    flatten_normalize,
    gt_loss,
    kd_loss,
    kl_bottleneck_loss,
    soft_dice,
    temperature_soften,
    total_loss,
)
from .network import (
    ForwardResult,
    NetworkConfig,
    SegmentationNetwork,
    build_network,
    freeze,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainState,
    lr_step,
    run_cross_validation,
    train_baseline,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "AblationRow",
    "AblationSpec",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataConfig",
    "ForwardResult",
    "IngestionError",
    "KDSegError",
    "LossReport",
    "LossWeights",
    "NetworkConfig",
    "RegionScores",
    "ResolvedConfig",
    "SegmentationNetwork",
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "binarize",
    "binary_cross_entropy",
    "build_network",
    "default_ablation_rows",
    "emit_report",
    "evaluate",
    "flatten_normalize",
    "freeze",
    "gt_loss",
    "hard_dice",
    "kd_loss",
    "kl_bottleneck_loss",
    "load_checkpoint",
    "lr_step",
    "parameter_checksum",
    "resolve_config",
    "run_ablation",
    "run_cross_validation",
    "save_checkpoint",
    "soft_dice",
    "temperature_soften",
    "total_loss",
    "train_baseline",
    "train_student",
    "train_teacher",
]
