"""Normalization layers lab: batch, axis, mixture and context normalization on a small autodiff engine."""

from .estimators import NormNetClassifier
from .exceptions import (ConfigurationError, DivergedError, FormatError, InputError, NormLabError, ShapeError,
                         UsageError)
from .gmm import GaussianMixture
from .norms import MixtureNormalizer, NormSpec
from .tensor import ParamStore, Tape, Tensor

__all__ = [
    "ConfigurationError", "DivergedError", "FormatError", "GaussianMixture", "InputError", "MixtureNormalizer",
    "NormLabError", "NormNetClassifier", "NormSpec", "ParamStore", "ShapeError", "Tape", "Tensor", "UsageError",
]
__version__ = "0.1.0"
