"""Exception hierarchy shared by every module.

The four top-level families map onto the CLI exit codes: configuration (2),
compatibility (3), numerical (4) and I/O (5).
"""


class MergeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1

    def __init__(self, message: str = "", *, layer: str | None = None):
        self.layer = layer
        if layer is not None and message:
            message = f"{message} [layer={layer}]"
        super().__init__(message)


class ConfigError(MergeError, ValueError):
    exit_code = 2


class CompatError(MergeError, ValueError):
    exit_code = 3


class NumericalError(MergeError, ArithmeticError):
    exit_code = 4


class IoFailure(MergeError, OSError):
    exit_code = 5


# -- container format -------------------------------------------------------


class CheckpointFormatError(IoFailure):
    """The file is not a valid checkpoint container."""


class MalformedHeader(CheckpointFormatError):
    pass


class TruncatedFile(CheckpointFormatError):
    pass


class UnsupportedDtype(CheckpointFormatError):
    pass


# -- compatibility ----------------------------------------------------------


class ShapeMismatch(CompatError):
    pass


class MissingTensor(CompatError):
    pass


class DtypeMismatch(CompatError):
    pass


class HighRankTensor(CompatError):
    pass


class LengthMismatch(CompatError):
    pass


# -- numerics ---------------------------------------------------------------


class NonFiniteInput(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class TooManyColumns(NumericalError):
    pass


class RankOutOfRange(NumericalError):
    pass


class AllZeroSpectrum(NumericalError):
    pass


class EmptyMatrix(NumericalError):
    pass


class InvalidFractions(ConfigError):
    pass
