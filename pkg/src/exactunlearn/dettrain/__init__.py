"""Deterministic toy-LM trainer: model, AdamW, schedule, checkpoints and the WAL-emitting loop."""

from .checkpoint import (CorruptionError, VersionMismatchError, checkpoint_load, checkpoint_save,
                         model_hash, opt_hash, state_hash)
from .model import ModelConfig, ModelParams, NumericFault, forward_loss_sum, grad, init_params
from .optim import OptState, TrainConfig, adamw_update, lr_at
from ..rng import RngKey
from .trainer import CheckpointPolicy, TrainRunResult, microbatch_plan, train

__all__ = [
    "CheckpointPolicy", "CorruptionError", "ModelConfig", "ModelParams", "NumericFault", "OptState",
    "RngKey", "TrainConfig", "TrainRunResult", "VersionMismatchError", "adamw_update",
    "checkpoint_load", "checkpoint_save", "forward_loss_sum", "grad", "init_params", "lr_at",
    "microbatch_plan", "model_hash", "opt_hash", "state_hash", "train",
]
