"""OD-pair demand forecasting with a residual multi-graph convolutional encoder-decoder."""
from . import evaluation  # registers the baseline network kinds for checkpoint loading
from .model import STEDRMGC, Architecture
from .tensor_core import Tensor

__all__ = ["STEDRMGC", "Architecture", "Tensor", "evaluation"]
__version__ = "0.1.0"
