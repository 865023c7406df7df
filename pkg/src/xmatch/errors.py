"""Exception types shared across the package."""


class XMatchError(Exception):
    """Base class for every error raised by xmatch."""


class DimensionError(XMatchError, ValueError):
    pass


class DomainError(XMatchError, ValueError):
    pass


class NormalizationError(XMatchError, ValueError):
    """A vector that must be normalized has zero norm."""


class NumericalError(XMatchError, ArithmeticError):
    pass


class ContractError(XMatchError, ValueError):
    pass


class ConfigError(XMatchError, ValueError):
    pass


class InputError(XMatchError, ValueError):
    pass


class FormatError(XMatchError, ValueError):
    pass


class CorruptionError(FormatError):
    """Payload checksum or length does not match the header."""


class DataError(XMatchError, ValueError):
    pass


class TrainingError(XMatchError, RuntimeError):
    pass
