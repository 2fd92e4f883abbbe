"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A masked softmax or reduction slice has no valid positions."""


class ContractError(ValueError):
    """A call violates an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataError(ValueError):
    """A corpus or embedding file could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


class CheckpointVersionError(ValueError):
    """Checkpoint header is missing, corrupted, or from another format version."""
