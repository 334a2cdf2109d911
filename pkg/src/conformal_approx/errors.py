class ConformalApproxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ConformalApproxError):
    pass


class FormatError(ConformalApproxError):
    pass


class OracleError(ConformalApproxError):
    pass


class OutOfBoxError(OracleError):
    pass


class ResourceBudgetError(ConformalApproxError):
    """A lattice would not fit the configured memory budget."""


class ConstructionError(ConformalApproxError):
    """A construction step could not satisfy its constraints."""


class InvariantViolation(ConformalApproxError):
    pass
