"""Exception hierarchy shared across the package."""


class PgaError(Exception):
    """Base class for all errors raised by pgalab."""


class DimensionError(PgaError, ValueError):
    pass


class ConfigError(PgaError, ValueError):
    pass


class NumericDomainError(PgaError, ArithmeticError):
    pass


class ContractError(PgaError, ValueError):
    pass


class FormatError(PgaError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(FormatError):
    pass


class NumericAbort(PgaError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, term=None):
        super().__init__(message)
        self.step = step
        self.term = term
