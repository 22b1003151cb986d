"""Federated multimodal meta-learning simulator (3MF) and its muted-branch baseline."""

from .errors import (ConfigError, CorruptionError, DataError, DivergenceError, FormatError, MMFedError,
                     ShapeError, UsageError)
from .model import ARCH_PRESETS, COMPACT_ARCH, DEFAULT_ARCH, FULL, ArchSpec, ModalityMask, MultimodalClassifier
from .tensor_core import ParamSet, Tensor

__version__ = "0.1.0"

__all__ = [
    "ARCH_PRESETS", "COMPACT_ARCH", "DEFAULT_ARCH", "FULL", "ArchSpec", "ModalityMask", "MultimodalClassifier",
    "ParamSet", "Tensor", "ConfigError", "CorruptionError", "DataError", "DivergenceError", "FormatError",
    "MMFedError", "ShapeError", "UsageError",
]
