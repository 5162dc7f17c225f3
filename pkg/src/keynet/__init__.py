"""Keypoint detection toolkit: handcrafted+learned detector, differentiable
multi-window localization loss, synthetic homography data, CPU training and
repeatability evaluation.

The package is self-contained: the numerical core is a small tape-based
reverse-mode autodiff engine over numpy arrays (see keynet.autodiff), and
every stage from data generation to evaluation runs on a plain CPU.
"""

from keynet.autodiff import (
    Tape,
    Variable,
    float64_verification,
    get_default_dtype,
    grad_check,
    set_default_dtype,
)
from keynet.model import KeyNetConfig, KeyNetModel

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Variable",
    "float64_verification",
    "get_default_dtype",
    "grad_check",
    "set_default_dtype",
    "KeyNetConfig",
    "KeyNetModel",
    "__version__",
]
