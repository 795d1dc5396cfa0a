from .layers import Module, ModuleList, Conv2d, ConvTranspose2d, BatchNorm2d, Linear
from .blocks import Bottleneck, Hourglass
from .cascade import (
    CascadeConfig,
    CascadeModel,
    DetectionNet,
    DetectionNetConfig,
    HourglassConfig,
    RegressionNet,
    ZRegressor,
    ZRegressorConfig,
    build_cascade,
    desk_config,
    full_config,
)
from .training import (
    LOG_COLUMNS,
    EpochRecord,
    TrainLog,
    TrainSample,
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
    train_stagewise,
    validation_gte_xy,
    validation_z_scores,
)

__all__ = [
    "Module", "ModuleList", "Conv2d", "ConvTranspose2d", "BatchNorm2d", "Linear",
    "Bottleneck", "Hourglass",
    "CascadeConfig", "CascadeModel", "DetectionNet", "DetectionNetConfig",
    "HourglassConfig", "RegressionNet", "ZRegressor", "ZRegressorConfig",
    "build_cascade", "desk_config", "full_config",
    "TrainSchedule", "TrainSample", "EpochRecord", "TrainLog", "LOG_COLUMNS",
    "train_stagewise", "validation_gte_xy", "validation_z_scores",
    "save_checkpoint", "load_checkpoint",
]
