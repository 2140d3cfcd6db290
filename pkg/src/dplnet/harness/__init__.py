from .checkpoint import (
    CheckpointError, CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError, TrainState,
    load_checkpoint, save_checkpoint,
)
from .config import RunConfig, RunConfigError, parse_config, serialize
from .evaluate import EvalResult, evaluate, evaluate_ms_flip, evaluate_ss
from .train import Trainer, TrainingDivergedError, frozen_hash, train

__all__ = [
    "CheckpointError", "CheckpointMagicError", "CheckpointTruncatedError", "CheckpointVersionError",
    "TrainState", "load_checkpoint", "save_checkpoint", "RunConfig", "RunConfigError", "parse_config",
    "serialize", "EvalResult", "evaluate", "evaluate_ms_flip", "evaluate_ss", "Trainer",
    "TrainingDivergedError", "frozen_hash", "train",
]
