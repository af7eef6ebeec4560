"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class LatentSceneError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentSceneError):
    """Invalid configuration: bad hyperparameter, layer geometry, config file key."""


class ShapeError(ConfigError):
    """Tensor shapes do not conform; message names both shapes."""


class UsageError(LatentSceneError):
    """An API was called in a way its contract forbids."""


class DataError(LatentSceneError):
    """A file or dataset is missing, malformed, or inconsistent."""


class NumericError(LatentSceneError):
    """Training produced a non-finite loss.

    Carries the batch index and the per-term breakdown of the offending step.
    """

    def __init__(self, message, batch_index=None, breakdown=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.breakdown = dict(breakdown) if breakdown else {}
