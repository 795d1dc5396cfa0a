"""Exception taxonomy shared across the package.

Each error class carries the process exit code the CLI maps it to:
0 ok, 2 config error, 3 data error, 4 numeric failure.
"""


class Phr3dError(Exception):
    exit_code = 1


class ConfigError(Phr3dError):
    """Invalid configuration, shapes, or wiring detected before/while computing."""

    exit_code = 2


class DataError(Phr3dError):
    """Missing or malformed input data (manifests, images, weight files)."""

    exit_code = 3


class NumericError(Phr3dError):
    """Non-finite values or numerically degenerate computations."""

    exit_code = 4


class ShapeError(ConfigError):
    """Tensor dimension mismatch; message names the offending dimensions."""


class DegenerateGeometryError(NumericError):
    """Point configuration too degenerate for the requested geometric fit."""


class UntrainedModelError(ConfigError):
    """Prediction requested from a model with no completed training stage."""
