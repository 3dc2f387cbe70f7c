"""Two-tower transformer personalization for e-commerce ranking:
retrieval pre-training, calibrated ranking fine-tuning with context
debiasing, batch-serving embedding export, and an offline evaluation
harness on synthetic data."""

from .autodiff import Tensor, apply_primitive, backward, gradcheck, no_grad
from .model import ModelParams, TowerConfig, init_params

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "apply_primitive",
    "backward",
    "gradcheck",
    "no_grad",
    "ModelParams",
    "TowerConfig",
    "init_params",
    "__version__",
]
