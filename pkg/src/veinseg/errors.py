"""Exception types shared across the package."""


class VeinsegError(Exception):
    """Base class for all package errors."""


class InvalidDimsError(VeinsegError):
    """Tensor extents are not all positive, or the shape is not 4-D."""


class ShapeError(VeinsegError):
    """Operand shapes (or dtypes) are incompatible for an operation."""


class IdentityError(VeinsegError):
    """A node, tape, or gradient was looked up where it does not exist."""


class DomainError(VeinsegError):
    """Values are outside the domain an operation requires."""


class EmptyInputError(VeinsegError):
    """An aggregate was requested over zero elements."""


class FormatError(VeinsegError):
    """A file does not conform to its binary or text format."""


class ConfigError(VeinsegError):
    """A configuration is internally inconsistent or unusable."""


class CompatibilityError(ConfigError):
    """A checkpoint does not match the model/data it is applied to."""


class DivergenceError(VeinsegError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
