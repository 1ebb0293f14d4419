"""Exception types. The CLI maps these onto exit codes 1 and 2."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ImageReadError(OSError):
    """A raster could not be opened or decoded."""


class CheckpointError(OSError):
    """A checkpoint container is missing, unreadable or malformed."""
