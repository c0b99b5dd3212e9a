"""Exception hierarchy shared by all modules."""


class LoftError(Exception):
    """Base class for all library errors."""


class ShapeError(LoftError, ValueError):
    """Operand extents or channel counts are inconsistent."""


class ParameterError(LoftError, ValueError):
    """A scalar parameter or enum value is out of its valid domain."""


class ContractError(LoftError, ValueError):
    """A documented precondition was violated (non-scalar loss, range violation, ...)."""


class ConfigError(LoftError, ValueError):
    """Invalid model or run configuration."""


class WeightFormatError(LoftError):
    """Weight file has foreign magic bytes or an unsupported version."""


class WeightIntegrityError(LoftError):
    """Weight file is truncated or its checksum does not match."""


class DivergenceError(LoftError, ArithmeticError):
    """Training produced a non-finite loss."""


class ImageIOError(LoftError, OSError):
    """An image could not be read or written."""
