"""NumPy convolutional classifier: layers, model assembly, Adam training, checkpoints."""
from .checkpoint import CheckpointError, load_model, save_model
from .model import (
    ClassifierModel,
    LayerSpec,
    build_mlp_baseline,
    build_model,
    build_paper_cnn,
    forward,
    loss_and_gradients,
    predict,
)
from .train import TrainConfig, TrainingError, adam_step, one_hot, train, write_history_csv

__all__ = [
    "CheckpointError",
    "ClassifierModel",
    "LayerSpec",
    "TrainConfig",
    "TrainingError",
    "adam_step",
    "build_mlp_baseline",
    "build_model",
    "build_paper_cnn",
    "forward",
    "load_model",
    "loss_and_gradients",
    "one_hot",
    "predict",
    "save_model",
    "train",
    "write_history_csv",
]
