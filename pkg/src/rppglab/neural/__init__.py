"""Generator, PRN estimator, their losses, checkpoints and training loops."""

from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from .losses import loss_appearance, loss_estimator, loss_generator, loss_ppg
from .models import GeneratorModel, PrnModel
from .training import (ClipSet, LogRow, TrainConfig, TrainingAborted, TrainResult, build_clips,
                       pretrain_generator, train_joint, train_prn)

__all__ = [
    "CheckpointError", "ClipSet", "GeneratorModel", "LogRow", "PrnModel", "TrainConfig",
    "TrainResult", "TrainingAborted", "build_clips", "load_checkpoint", "loss_appearance",
    "loss_estimator", "loss_generator", "loss_ppg", "pretrain_generator", "read_meta",
    "save_checkpoint", "train_joint", "train_prn",
]
