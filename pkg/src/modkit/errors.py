"""Exception hierarchy shared across the package."""


class ModkitError(Exception):
    """Base class for all errors raised by modkit."""


class ShapeError(ModkitError):
    """Array shapes are inconsistent with what an operation requires."""


class ContractError(ModkitError):
    """A caller violated a documented precondition."""


class DegenerateInputError(ModkitError):
    """Input is structurally valid but empty/degenerate for the operation."""


class NumericsError(ModkitError):
    """A numeric computation produced non-finite values."""


class ParseError(ModkitError):
    """A file could not be parsed; carries the path and byte offset."""

    def __init__(self, message: str, path: str, offset: int):
        super().__init__(f"{path} (byte {offset}): {message}")
        self.path = path
        self.offset = offset


class ConfigError(ModkitError):
    """A run configuration is invalid; names the offending field."""
