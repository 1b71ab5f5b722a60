"""Exception types shared across the package.

Every error raised on purpose by this package derives from one of these,
so callers can distinguish bad inputs from tool failures.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands have incompatible dimensions."""


class ConfigError(ContractError):
    """A configuration value is inconsistent (e.g. dim not divisible by heads)."""


class ValidationError(ContractError):
    """Input data (manifest record, bbox, label) failed validation."""


class FormatError(ContractError):
    """A serialized artifact (checkpoint, sidecar, CSV) could not be parsed."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class AdapterError(RuntimeError):
    """An external tool invoked through an adapter failed."""


class DataIOError(OSError):
    """An image or file referenced by a record could not be read."""

    def __init__(self, message: str, object_id: str | None = None):
        super().__init__(message)
        self.object_id = object_id
