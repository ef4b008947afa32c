"""Exception taxonomy shared by the whole pipeline.

Every error that can surface at the CLI maps to one of four categories,
each with a fixed process exit code: usage (2), config (3), data (4),
numeric (5).
"""

from __future__ import annotations


class MotokError(Exception):
    category = "internal"
    exit_code = 1


class UsageError(MotokError):
    category = "usage"
    exit_code = 2


class ConfigError(MotokError):
    category = "config"
    exit_code = 3


class ShapeError(ConfigError):
    """Tensor shape disagreement between operands."""


class BoundsError(ConfigError):
    """Argument outside its documented range."""


class DataError(MotokError):
    category = "data"
    exit_code = 4


class FormatError(DataError):
    """Corrupt or unrecognized file contents."""


class VersionError(DataError):
    """On-disk version does not match this implementation."""


class CountError(DataError):
    """Declared record count disagrees with actual records."""


class NumericError(MotokError):
    category = "numeric"
    exit_code = 5


class TrainingError(NumericError):
    """Non-finite loss or gradient during optimization."""
