"""Exception hierarchy shared across the package."""


class PttaError(Exception):
    """Base class for all package errors."""


class ShapeError(PttaError):
    """Operand shapes are incompatible."""


class DomainError(PttaError):
    """A value lies outside an operation's declared domain."""


class DegenerateInputError(PttaError):
    """Input is numerically degenerate (e.g. a zero-norm vector)."""


class ContractError(PttaError):
    """An API contract was violated by the caller."""


class EmptyReliableSetError(ContractError):
    """A loss was requested over an empty reliable set; callers must skip the update."""


class FormatError(PttaError):
    """A serialized file is corrupt or has an unsupported version."""


class ConfigError(PttaError):
    """A configuration or plan is invalid."""


class TrainingError(PttaError):
    """Source-model training diverged."""


class MeasurementError(PttaError):
    """A timing measurement is unusable (e.g. zero duration)."""


class InsufficientDataError(PttaError):
    """Not enough matched data points for the requested statistic."""
