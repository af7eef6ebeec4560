"""Concept-partitioned scene autoencoders with latent-space prediction.

The package provides a small numpy-backed autodiff engine (`tensor`), a
procedural driving-scene generator (`scenes`), binary dataset/checkpoint
containers (`dataio`), the four model families (`nets`), their training
objectives (`losses`), the optimization loop (`train`), evaluation and
imagery procedures (`metrics`), and a YAML-driven CLI (`cli`).
"""

from . import cli, config, dataio, losses, metrics, nets, scenes, tensor, train
from .errors import (ConfigError, DataError, LatentSceneError, NumericError,
                     ShapeError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "cli", "config", "dataio", "losses", "metrics", "nets", "scenes",
    "tensor", "train", "ConfigError", "DataError", "LatentSceneError",
    "NumericError", "ShapeError", "UsageError", "__version__",
]
