"""seatlab: single-step adversarial training with a local-linearity regularizer,
baseline defenses, attacks and diagnostics, on a small numpy autodiff engine."""
from .attacks import AttackSpec, run_attack
from .models import Model, ModelSpec
from .training import TrainConfig, train

__all__ = ["AttackSpec", "Model", "ModelSpec", "TrainConfig", "run_attack", "train"]
__version__ = "0.1.0"
