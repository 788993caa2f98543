class HMDNError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HMDNError, ValueError):
    pass


class ConfigError(HMDNError, ValueError):
    pass


class IngestionError(HMDNError, ValueError):
    pass


class UsageError(HMDNError, RuntimeError):
    pass


class NumericalError(HMDNError, ArithmeticError):
    pass


class UndefinedMetricError(HMDNError, ValueError):
    pass


class NonDeterministicError(HMDNError, RuntimeError):
    pass
