"""Exception hierarchy shared by every dsmix module."""


class DSMError(Exception):
    """Base class for all errors raised by dsmix."""


class InvalidArgumentError(DSMError, ValueError):
    pass


class ShapeError(DSMError, ValueError):
    pass


class NumericError(DSMError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ResourceLimitError(DSMError, MemoryError):
    pass


class InvalidStateError(DSMError, RuntimeError):
    """Stale activation tape or mismatched parameter record."""


class ConfigError(DSMError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line


class FormatError(DSMError, ValueError):
    """Malformed binary file (bad magic, truncation)."""


class ConsistencyError(DSMError, ValueError):
    pass


class VersionError(DSMError, ValueError):
    pass


class CorruptionError(DSMError, ValueError):
    """Checksum mismatch in a checkpoint."""
