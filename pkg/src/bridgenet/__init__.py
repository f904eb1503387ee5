"""Multi-task dense prediction with cross-task interaction, on a numpy autodiff core."""

from .data import SceneConfig, build_dataset, generate_scene, load_split
from .metrics import MetricsReport
from .model import BridgeNet, ModelConfig, build_model, compute_losses, forward
from .optim import OptimConfig, Optimizer, poly_lr
from .tensor import ConfigError, Rng, ShapeError, Tensor, grad_check, no_grad
from .train import RunConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BridgeNet", "ConfigError", "MetricsReport", "ModelConfig", "OptimConfig", "Optimizer", "Rng",
    "RunConfig", "SceneConfig", "ShapeError", "Tensor", "build_dataset", "build_model", "compute_losses",
    "evaluate", "forward", "generate_scene", "grad_check", "load_checkpoint", "load_split", "no_grad",
    "poly_lr", "save_checkpoint", "train",
]
