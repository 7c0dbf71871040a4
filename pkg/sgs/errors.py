"""
SGS Errors - exception hierarchy shared by every module, and the CLI exit codes
each one maps to.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class SGSError(Exception):
    """Base class for every error raised on purpose by the package."""

    exit_code = EXIT_DATA


class ConfigurationError(SGSError, ValueError):
    """Bad config keys or values, shape mismatches between networks and inputs."""

    exit_code = EXIT_USAGE


class SizeViolationError(SGSError, ValueError):
    """A room does not fit inside the grid extent."""

    exit_code = EXIT_USAGE


class DataError(SGSError, ValueError):
    """Input data is malformed or insufficient."""


class FormatError(DataError):
    """A container failed magic, version, bounds or checksum validation."""


class EstimationFailedError(DataError):
    """Camera pose estimation from a wall region did not converge."""


class NumericalFailure(SGSError, RuntimeError):
    """A loss or gradient became non-finite, or a gradient check failed."""

    exit_code = EXIT_NUMERICAL
