"""Deterministic numpy CNN core for the patch and persistence-image models."""

from .model import (
    Conv2D,
    Conv3D,
    Dense,
    Flatten,
    MaxPool,
    Model,
    ModelSpec,
    ReLU,
    Sigmoid,
    backward_gradients,
    bce_loss,
    build_model,
    default_image_spec,
    default_patch_spec,
    encode,
    forward,
    forward_batch,
    he_uniform_init,
    load_model,
    loss_and_gradients,
    predict_proba,
    save_model,
)
from .train import AdamState, TrainConfig, TrainHistory, adam_step, train_with_early_stopping

__all__ = [
    "AdamState",
    "Conv2D",
    "Conv3D",
    "Dense",
    "Flatten",
    "MaxPool",
    "Model",
    "ModelSpec",
    "ReLU",
    "Sigmoid",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "backward_gradients",
    "bce_loss",
    "build_model",
    "default_image_spec",
    "default_patch_spec",
    "encode",
    "forward",
    "forward_batch",
    "he_uniform_init",
    "load_model",
    "loss_and_gradients",
    "predict_proba",
    "save_model",
    "train_with_early_stopping",
]
