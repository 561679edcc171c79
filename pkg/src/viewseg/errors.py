"""Exception types shared across the package."""


class ViewsegError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ViewsegError):
    """Input data violates a documented invariant or precondition."""


class ConfigError(ViewsegError):
    """Configuration is internally inconsistent or incompatible with a checkpoint."""


class NumericsError(ViewsegError):
    """A numerical computation produced non-finite intermediate values."""


class MeshFormatError(ViewsegError):
    """A mesh file could not be parsed.

    Carries the offending location: ``line`` (1-based) for text formats,
    ``offset`` (bytes from file start) for binary formats.
    """

    def __init__(self, path, message, *, line=None, offset=None):
        location = ""
        if line is not None:
            location = f", line {line}"
        elif offset is not None:
            location = f", byte offset {offset}"
        super().__init__(f"{path}{location}: {message}")
        self.path = str(path)
        self.line = line
        self.offset = offset
