"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class ShapeError(InvalidInputError):
    """Raised when a tensor has the wrong shape for a network."""


class ParseError(ValueError):
    """Raised by the IDX reader; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(RuntimeError):
    """Dataset layout or file problems."""


class ConfigError(ValueError):
    """Run configuration failed validation.

    ``field`` names the offending dotted key when known.
    """

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf objective."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
