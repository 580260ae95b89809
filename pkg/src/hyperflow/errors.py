"""Exception hierarchy.

Three families map onto CLI exit codes: :class:`ConfigError` (usage, exit 1),
:class:`DataError` (bad or inconsistent inputs, exit 2) and
:class:`NumericalError` (a computation could not produce a valid result,
exit 3).
"""


class HyperFlowError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HyperFlowError):
    """Malformed configuration or command-line usage."""


class DataError(HyperFlowError):
    """Input data violates a file contract or a type invariant."""


class MissingDateError(DataError):
    pass


class NegativePrecipError(DataError):
    pass


class NegativePredictionError(DataError):
    pass


class NonNumericError(DataError):
    pass


class EmptyFileError(DataError):
    pass


class NoOverlapError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class MemberMismatchError(DataError):
    pass


class WindowMismatchError(DataError):
    pass


class SchemaMismatchError(DataError):
    pass


class EmptyTrainSetError(DataError):
    pass


class InsufficientBasinsError(DataError):
    pass


class EmptyRegionError(DataError):
    pass


class NumericalError(HyperFlowError):
    """A numerical routine failed to produce a finite, valid answer."""


class DivergedSimulationError(NumericalError):
    pass


class AllDivergedError(NumericalError):
    pass


class DegenerateReservoirError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class NotConvergedError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    pass
