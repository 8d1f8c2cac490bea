"""Exception taxonomy shared across the package."""


class EegGateError(Exception):
    """Base class for all package errors."""


class DimensionError(EegGateError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EegGateError, ValueError):
    """Argument value outside the operation's domain."""


class LengthError(EegGateError, ValueError):
    """Signal or axis too short for the requested operation."""


class ContractError(EegGateError, ValueError):
    """A documented call contract was violated."""


class ConfigError(EegGateError, ValueError):
    """Invalid or unknown configuration."""


class NumericError(EegGateError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class FormatError(EegGateError, ValueError):
    """Container file cannot be parsed. ``code`` is machine readable."""

    code = "format"


class BadMagicError(FormatError):
    code = "magic"


class TruncatedFileError(FormatError):
    code = "truncated"


class SizeMismatchError(FormatError):
    code = "size-mismatch"
