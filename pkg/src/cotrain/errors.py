"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(ValueError):
    """A call violates an interface contract (e.g. backward on a non-scalar)."""


class GraphError(RuntimeError):
    """The autodiff tape is in the wrong state for the requested operation."""


class FormatError(ValueError):
    """A serialized tensor file is malformed.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelError(ValueError):
    """A class label is outside the valid range for its dataset."""


class NumericError(FloatingPointError):
    """A loss or activation became non-finite."""


class RegistryError(KeyError):
    """Duplicate registration or failed lookup in a registry."""


class BatchSizeError(ValueError):
    """A batch is too small for the requested computation."""
