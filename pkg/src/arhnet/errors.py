"""
Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to:
2 usage, 3 data, 4 numeric failure.
"""


class ArhnetError(Exception):
    exit_code = 1


class UsageError(ArhnetError):
    exit_code = 2


class DataError(ArhnetError):
    exit_code = 3


class VolumeFormatError(DataError):
    """Malformed file. `field` names the header field that failed to parse."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class UnsupportedFormatError(DataError):
    pass


class VolumeIOError(DataError):
    def __init__(self, message, path=None):
        super().__init__(f"{message} [{path}]" if path is not None else message)
        self.path = path


class PreconditionError(DataError):
    pass


class PlacementError(DataError):
    pass


class DegenerateRegionError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ShapeError(ArhnetError):
    exit_code = 3


class NumericError(ArhnetError):
    exit_code = 4


class UndefinedMetricError(DataError):
    """Surface metrics of an empty mask; reported as a missing value."""
