"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto stable exit codes: usage/config problems exit 2,
data problems exit 3, protocol violations exit 4.
"""


class OWODError(Exception):
    """Base class for every error raised deliberately by this package."""


class ParameterError(OWODError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(ParameterError):
    """A run configuration failed validation."""


class ShapeError(OWODError, ValueError):
    """Array or tensor shapes disagree with the expected contract."""


class NumericError(OWODError, ArithmeticError):
    """A loss term or metric became NaN/Inf."""


class DegenerateBoxError(OWODError, ValueError):
    """A box covers no cell of a spatial map ("empty pooling region")."""


class CapacityError(OWODError, ValueError):
    """More ground-truth boxes than object queries."""


class DataError(OWODError):
    """Malformed or inconsistent dataset input."""


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class ScheduleCoverageError(DataError):
    pass


class LeakageError(DataError):
    """A label of a not-yet-introduced class reached a training path."""


class ProtocolError(OWODError):
    """The incremental task protocol was violated (missing checkpoint, ...)."""


class FrozenModelError(ProtocolError):
    """A training operation was attempted on a frozen (detached) model."""
