"""Exception hierarchy shared by every module of the package."""


class EnergyOODError(Exception):
    """Base class for all package errors."""


class DimensionError(EnergyOODError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EnergyOODError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(DomainError):
    """A non-finite value was produced or supplied."""


class ParameterError(EnergyOODError, ValueError):
    """An argument violates its declared range."""


class DataError(EnergyOODError, ValueError):
    """Dataset contents violate their contract (labels, sizes)."""


class FormatError(EnergyOODError, ValueError):
    """A file does not follow its binary or text format."""


class ContractError(EnergyOODError, RuntimeError):
    """A precondition on program state was violated."""


class CalibrationError(EnergyOODError, ValueError):
    """Threshold calibration cannot be performed on the given scores."""


class ConfigError(EnergyOODError, ValueError):
    """A run configuration is malformed or references missing inputs."""


class TuningDivergedError(EnergyOODError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
