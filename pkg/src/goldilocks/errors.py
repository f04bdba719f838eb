"""Exception hierarchy shared by all modules."""


class GoldilocksError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(GoldilocksError):
    """Inconsistent shapes, architectures or experiment settings."""


class InputError(GoldilocksError, ValueError):
    """An argument is outside the domain of the operation."""


class NumericalError(GoldilocksError, ArithmeticError):
    """A numerical routine failed (non-finite values, no convergence)."""


class NumericalRangeError(NumericalError):
    """Values overflowed, typically at extreme configuration-space radii."""

    def __init__(self, message, radius=None):
        super().__init__(message)
        self.radius = radius


class DegeneratePointError(NumericalError):
    """A chart was evaluated where it is not defined."""


class FormatError(GoldilocksError, ValueError):
    """A file or record does not follow the expected layout."""


class ConsistencyError(GoldilocksError, ValueError):
    """Two inputs that must agree do not."""


class TruncatedFileError(GoldilocksError, IOError):
    """A binary file ended before the declared payload."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
