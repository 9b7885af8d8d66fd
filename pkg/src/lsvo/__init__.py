"""Latent-space visual odometry: ego-motion from dense optical flow with a joint auto-encoder."""

from __future__ import annotations

__version__ = "0.1.0"

from .geometry import compose_trajectory, euler_to_rot, from_se3, rot_to_euler, to_se3
from .losses import TrainConfig, loss_ae, loss_em, loss_joint
from .models import ModelGraph, build_lsvo, build_stvo, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check

__all__ = [
    "__version__", "Tensor", "grad_check", "ModelGraph", "build_lsvo", "build_stvo", "save_checkpoint",
    "load_checkpoint", "TrainConfig", "loss_ae", "loss_em", "loss_joint", "to_se3", "from_se3",
    "euler_to_rot", "rot_to_euler", "compose_trajectory",
]
