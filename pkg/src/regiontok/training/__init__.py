from .gradcheck import GRAD_TOL, grad_check, run_suite
from .hungarian import assignment_cost, hungarian_match
from .losses import (
    LossConfig,
    attention_loss,
    distillation_loss,
    text_contrastive_loss,
    visual_contrastive_loss,
)
from .trainer import (
    DistillTargets,
    EmptySupervisionError,
    NonFiniteLossError,
    OptimConfig,
    Trainer,
    build_cost,
    clip_grad_norm,
    lr_at,
    make_targets,
    sample_points,
)

__all__ = [
    "DistillTargets",
    "EmptySupervisionError",
    "GRAD_TOL",
    "LossConfig",
    "NonFiniteLossError",
    "OptimConfig",
    "Trainer",
    "assignment_cost",
    "attention_loss",
    "build_cost",
    "clip_grad_norm",
    "distillation_loss",
    "grad_check",
    "hungarian_match",
    "lr_at",
    "make_targets",
    "run_suite",
    "sample_points",
    "text_contrastive_loss",
    "visual_contrastive_loss",
]
