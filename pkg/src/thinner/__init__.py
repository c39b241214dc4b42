"""Gradually global neuron-level pruning.

Score every neuron and filter of a trained network with layer-normalized
contribution scores, drop the globally least important fraction, fine-tune,
and repeat until a performance target is breached.
"""

from thinner.errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    InfeasibleSelectionError,
    ModelFormatError,
    ShapeError,
    ThinnerError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "ConfigError",
    "DataFormatError",
    "InfeasibleSelectionError",
    "ModelFormatError",
    "ShapeError",
    "ThinnerError",
    "VersionError",
]
