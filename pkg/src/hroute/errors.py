"""Exception types shared across the package."""


class HRouteError(Exception):
    """Base class for every error raised by hroute."""


class ShapeError(HRouteError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HRouteError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(HRouteError, ArithmeticError):
    """A computation produced NaN/Inf or received an out-of-domain input."""


class DomainError(NumericError):
    """Input outside the mathematical domain of an op (e.g. log of x <= 0)."""


class CheckpointError(HRouteError):
    """A checkpoint file is corrupt, truncated or of an unsupported version."""


class ConfigError(HRouteError, ValueError):
    """A run configuration failed validation.

    ``path`` is the dotted field path of the offending entry.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TraceFormatError(HRouteError, ValueError):
    """A serialized trace document could not be parsed."""


class DivergenceError(HRouteError):
    """Training produced a non-finite loss or gradient."""
