"""Training, evaluation and the experiment runners behind the ``e2eloc`` CLI."""

from .config import ExperimentConfig, load_config
from .train import build_model, evaluate, train_e2e

__all__ = ["ExperimentConfig", "build_model", "evaluate", "load_config", "train_e2e"]
