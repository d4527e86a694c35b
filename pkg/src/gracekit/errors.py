"""Exception types shared across gracekit."""


class GraceError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GraceError, ValueError):
    pass


class DomainError(GraceError, ValueError):
    """An input lies outside the set where an operation is defined."""


class ContractError(GraceError, RuntimeError):
    pass


class NumericalError(GraceError, FloatingPointError):
    """A public operation produced NaN or Inf."""


class FormatError(GraceError, ValueError):
    """A packed checkpoint is malformed."""


class ConfigError(GraceError, ValueError):
    pass
