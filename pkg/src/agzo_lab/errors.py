"""Exception hierarchy shared across the lab."""


class LabError(Exception):
    """Base class for all errors raised by agzo_lab."""


class DimensionError(LabError, ValueError):
    pass


class RankError(LabError, ValueError):
    """Raised when a matrix is numerically rank deficient.

    ``column`` is the index of the first column found to be linearly
    dependent on the ones before it.
    """

    def __init__(self, message, column):
        super().__init__(message)
        self.column = column


class NumericError(LabError, ArithmeticError):
    """Non-finite value encountered; ``layer`` names where it first appeared."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ConfigError(LabError, ValueError):
    pass


class DomainError(LabError, ValueError):
    pass


class InvariantError(LabError, ValueError):
    pass
