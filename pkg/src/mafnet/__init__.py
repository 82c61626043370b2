"""Multi-attention fusion classifier for drowsiness detection, on a numpy autodiff core."""

from .model import MafConfig, MafParams, init_params, maf_forward
from .tensor import Rng, Tape, Tensor, backward

__all__ = ["MafConfig", "MafParams", "Rng", "Tape", "Tensor", "backward", "init_params", "maf_forward"]
__version__ = "0.1.0"
