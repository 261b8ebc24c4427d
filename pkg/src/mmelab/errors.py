"""Exception hierarchy shared across the package."""


class MMELabError(Exception):
    """Base class for all package errors."""


class DimensionError(MMELabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MMELabError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(MMELabError, ArithmeticError):
    """A forward operation produced inf or NaN."""


class ConfigError(MMELabError, ValueError):
    """Invalid task, split or training configuration."""


class ParseError(MMELabError, ValueError):
    """Malformed dataset file. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalAbort(MMELabError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
