"""Exception hierarchy shared by every csihar module."""


class CsiharError(Exception):
    """Base class for all library errors."""


class ContractError(CsiharError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError, ValueError):
    pass


class DomainError(ContractError, ValueError):
    pass


class GraphError(ContractError, RuntimeError):
    pass


class GradCheckError(ContractError):
    pass


class ConfigError(CsiharError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class IntegrityError(CsiharError):
    pass


class FormatVersionError(CsiharError):
    pass


class NumericalError(CsiharError, ArithmeticError):
    """Training produced a non-finite value."""
