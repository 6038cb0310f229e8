class LPNError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(LPNError, ValueError):
    pass


class DataError(LPNError, ValueError):
    pass


class NumericalError(LPNError, ArithmeticError):
    pass
