"""Exception hierarchy.

Each family maps to one CLI exit code: configuration problems exit with 1,
data/precondition problems with 2 and numerical failures with 3.
"""


class RangeSlamError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigError(RangeSlamError):
    exit_code = 1


class DataError(RangeSlamError):
    """Input data violates a precondition."""

    exit_code = 2


class InsufficientSamplesError(DataError):
    pass


class DegenerateGeometryError(DataError):
    pass


class NegativeDistanceError(DataError):
    pass


class BehindCameraError(DataError):
    pass


class InfeasibleWorldError(DataError):
    pass


class GraphError(DataError):
    """The factor graph violates a structural invariant."""


class NumericalError(RangeSlamError):
    exit_code = 3


class RankDeficiencyError(NumericalError):
    def __init__(self, message, variables=()):
        super().__init__(message)
        self.variables = list(variables)
