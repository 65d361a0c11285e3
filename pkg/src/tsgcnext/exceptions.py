"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible."""


class InputError(ValueError):
    """Raised for out-of-range or malformed input values."""


class UsageError(RuntimeError):
    """Raised when an API is called outside its contract."""


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants.

    ``violations`` lists every problem found, not just the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(ValueError):
    """Raised when a binary file cannot be decoded."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ResourceError(MemoryError):
    """Raised when a requested workload cannot fit in available memory."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""
