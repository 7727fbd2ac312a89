"""Patch transformer forecaster for the dynamic voltage residual."""

from .model import (
    TstConfig,
    TstError,
    TstModel,
    backward,
    forward,
    loss,
    loss_and_grad,
    mse,
    param_count,
    param_shapes,
    patchify,
    unpatchify,
)
from .train import (
    EarlyStopping,
    OptimConfig,
    TrainResult,
    TrainState,
    WindowBatch,
    WindowSet,
    adamw_step,
    clip_grads,
    cosine_lr,
    evaluate_loss,
    make_windows,
    train,
)

__all__ = [
    "TstConfig", "TstError", "TstModel", "backward", "forward", "loss", "loss_and_grad", "mse",
    "param_count", "param_shapes", "patchify", "unpatchify", "EarlyStopping", "OptimConfig",
    "TrainResult", "TrainState", "WindowBatch", "WindowSet", "adamw_step", "clip_grads",
    "cosine_lr", "evaluate_loss", "make_windows", "train",
]
