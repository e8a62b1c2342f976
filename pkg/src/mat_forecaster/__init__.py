"""Two-stream modality-aware transformer forecaster with baselines and attention export."""

__version__ = "0.1.0"

from .numerics import Tensor, AdamState, adam_step, backward, no_grad  # noqa: F401
