"""Noise injection, losses and training loops."""
from .data import Sample, SceneDataset, specs_from_manifest
from .losses import LossConfig, loss_l1, loss_l2, masked_l1
from .noise import NoiseSpec, inject_noise, make_noise, make_regional_noise, make_white_noise, mean_speed
from .trainer import (TrainConfig, TrainingDiverged, TrainResult, evaluate_global, evaluate_htr,
                      load_training_checkpoint, residual_losses, save_training_checkpoint, train_global,
                      train_residual)

__all__ = [
    "Sample", "SceneDataset", "specs_from_manifest", "LossConfig", "loss_l1", "loss_l2", "masked_l1",
    "NoiseSpec", "inject_noise", "make_noise", "make_regional_noise", "make_white_noise", "mean_speed",
    "TrainConfig", "TrainingDiverged", "TrainResult", "evaluate_global", "evaluate_htr",
    "load_training_checkpoint", "residual_losses", "save_training_checkpoint", "train_global",
    "train_residual",
]
