"""Numpy autograd, attention-augmented CNN classifiers for multi-cell images,
and integrated-gradients explanations."""

__version__ = "0.1.0"

from cellattn.tensor import GradientTape, NonFiniteError, ShapeError, Tensor, gradient, no_grad  # noqa: E402
from cellattn.models import ModelConfig, Network, build_model, full_config, mini_config  # noqa: E402

__all__ = ["GradientTape", "ModelConfig", "Network", "NonFiniteError", "ShapeError", "Tensor", "__version__",
           "build_model", "full_config", "gradient", "mini_config", "no_grad"]
