"""Feed-forward encoder-decoder segmentation of physiological time series."""

from .model import UTimeConfig, UTimeModel, build_model, canonical_config, receptive_field
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor",
    "no_grad",
    "UTimeConfig",
    "UTimeModel",
    "build_model",
    "canonical_config",
    "receptive_field",
]
__version__ = "0.1.0"
