"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1, file and
format errors -> 2, NumericalError -> 3. Everything else is a bug and
propagates as a traceback.
"""


class PruneSearchError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(PruneSearchError, ValueError):
    """Operands have incompatible shapes."""


class InputError(PruneSearchError, ValueError):
    """An argument value is outside the accepted domain."""


class StateError(PruneSearchError, RuntimeError):
    """An operation was called while the object is in the wrong state."""


class ConfigError(PruneSearchError, ValueError):
    """A configuration file or value is invalid or infeasible."""


class FormatError(PruneSearchError, IOError):
    """A file on disk does not match the expected binary or JSON layout."""


class NumericalError(PruneSearchError, ArithmeticError):
    """A computation produced a non-finite value."""
