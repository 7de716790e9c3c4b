from shardwise.pipeline.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
)
from shardwise.pipeline.config import PipelineSpec, RunConfig
from shardwise.pipeline.deployer import Deployer, linear_warmup_decay
from shardwise.pipeline.predictor import PredictionError, Predictor
from shardwise.pipeline.trainer import RunLog, Trainer, TrainingError

__all__ = [
    "Checkpoint", "CheckpointError", "Deployer", "PipelineSpec", "PredictionError", "Predictor",
    "RunConfig", "RunLog", "Trainer", "TrainingError", "linear_warmup_decay", "load_checkpoint",
    "read_checkpoint", "save_checkpoint", "state_from_checkpoint",
]
