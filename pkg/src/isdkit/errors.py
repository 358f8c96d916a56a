class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


class InvalidConfigError(ValueError):
    """Raised for inconsistent decoding or simulation configuration."""
