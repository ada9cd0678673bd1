"""Training: schedule, freeze masks, distillation, checkpoints and the stage loops."""

from msstyle.training.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from msstyle.training.schedule import GROUPS, FreezeMask, distillation_loss, group_of, lr_at
from msstyle.training.trainer import (
    TargetCache,
    Trainer,
    TrainerState,
    batch_indices,
    model_from_checkpoint,
    phase_plan,
)

__all__ = [
    "Checkpoint", "read_checkpoint", "write_checkpoint",
    "GROUPS", "FreezeMask", "distillation_loss", "group_of", "lr_at",
    "TargetCache", "Trainer", "TrainerState", "batch_indices", "model_from_checkpoint", "phase_plan",
]
