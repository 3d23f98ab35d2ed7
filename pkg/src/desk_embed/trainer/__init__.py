from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import OptimizerState, adamw_step, clip_grad_norm, global_norm
from .plans import PUBLISHED_DEFAULTS, Schedule, Stage, TrainPlan, desk_plan, load_plan, lr_at, published_plan
from .stage import ContrastiveData, MlmData, StageResult, TrainingDiverged, run_stage

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "OptimizerState", "adamw_step", "clip_grad_norm", "global_norm",
    "PUBLISHED_DEFAULTS", "Schedule", "Stage", "TrainPlan", "desk_plan", "load_plan", "lr_at", "published_plan",
    "ContrastiveData", "MlmData", "StageResult", "TrainingDiverged", "run_stage",
]
