from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, ModelState, PredictiveModel, baseline_previous_frame, rollout, step, windowed_rollout
from .training import TrainParams, sequence_loss, train

__all__ = [
    "ModelConfig",
    "ModelState",
    "PredictiveModel",
    "TrainParams",
    "baseline_previous_frame",
    "load_checkpoint",
    "rollout",
    "save_checkpoint",
    "sequence_loss",
    "step",
    "train",
    "windowed_rollout",
]
